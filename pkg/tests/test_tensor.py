"""Forward semantics of every core op against independent oracles."""

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xres import tensor as T
from xres.tensor import Tensor

from conftest import leaf


def conv2d_loops(x, w, stride, pad):
    """Direct nested-loop cross-correlation; the oracle conv2d must match."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo), dtype=x.dtype)
    for b in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += xp[b, c, i * stride + di, j * stride + dj] * w[o, c, di, dj]
                    out[b, o, i, j] = acc
    return out


def batchnorm_twopass(x, gamma, beta, eps=1e-5):
    """Naive per-channel mean/variance normalization."""
    out = np.empty_like(x)
    for c in range(x.shape[1]):
        xc = x[:, c]
        mu = xc.mean()
        var = ((xc - mu) ** 2).mean()
        out[:, c] = gamma[c] * (xc - mu) / np.sqrt(var + eps) + beta[c]
    return out


class TestConv2d:
    def test_identity_kernel(self):
        x = leaf([[[[2.0]]]])
        w = leaf([[[[1.0]]]])
        out = T.conv2d(x, w, stride=1, pad=0)
        npt.assert_array_equal(out.data, [[[[2.0]]]])

    def test_sum_of_ones(self):
        x = leaf(np.ones((1, 1, 3, 3)))
        w = leaf(np.ones((1, 1, 3, 3)))
        out = T.conv2d(x, w, stride=1, pad=0)
        npt.assert_array_equal(out.data, [[[[9.0]]]])

    def test_matches_loop_oracle_strided_padded(self, rng):
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        out = T.conv2d(leaf(x), leaf(w), stride=2, pad=1)
        expect = conv2d_loops(x, w, stride=2, pad=1)
        npt.assert_allclose(out.data, expect, atol=1e-12, rtol=0)

    def test_matches_loop_oracle_100_random_shapes(self, rng):
        for _ in range(100):
            n = int(rng.integers(1, 3))
            cin = int(rng.integers(1, 4))
            cout = int(rng.integers(1, 4))
            k = int(rng.integers(1, 4))
            stride = int(rng.integers(1, 3))
            pad = int(rng.integers(0, 2))
            h = int(rng.integers(k, k + 4))
            wd = int(rng.integers(k, k + 4))
            x = rng.standard_normal((n, cin, h, wd))
            w = rng.standard_normal((cout, cin, k, k))
            out = T.conv2d(leaf(x), leaf(w), stride=stride, pad=pad)
            npt.assert_allclose(out.data, conv2d_loops(x, w, stride, pad),
                                atol=1e-12, rtol=0)

    def test_channel_mismatch_rejected(self):
        x = leaf(np.zeros((1, 3, 5, 5)))
        w = leaf(np.zeros((4, 2, 3, 3)))
        with pytest.raises(ValueError, match=r"3.*2"):
            T.conv2d(x, w)

    def test_output_size_formula(self, rng):
        x = leaf(rng.standard_normal((2, 1, 11, 7)))
        w = leaf(rng.standard_normal((1, 1, 3, 3)))
        out = T.conv2d(x, w, stride=2, pad=1)
        assert out.shape == (2, 1, (11 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1)


class TestBatchNorm:
    def test_normalized_input_passthrough(self, rng):
        x = rng.standard_normal((4, 3, 8, 8))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        state = T.BatchNormState(3, dtype=np.float64)
        out = T.batchnorm(leaf(x), leaf(np.ones(3)), leaf(np.zeros(3)), state, train=True)
        assert np.abs(out.data - x).max() <= 1e-4

    def test_constant_input_zeroed(self):
        x = leaf(np.full((2, 2, 3, 3), 5.0))
        state = T.BatchNormState(2, dtype=np.float64)
        out = T.batchnorm(x, leaf(np.ones(2)), leaf(np.zeros(2)), state, train=True)
        npt.assert_array_equal(out.data, np.zeros_like(x.data))

    def test_matches_twopass_oracle(self, rng):
        x = rng.standard_normal((3, 4, 5, 6)) * 3.0 + 1.5
        gamma = rng.standard_normal(4)
        beta = rng.standard_normal(4)
        state = T.BatchNormState(4, dtype=np.float64)
        out = T.batchnorm(leaf(x), leaf(gamma), leaf(beta), state, train=True)
        npt.assert_allclose(out.data, batchnorm_twopass(x, gamma, beta),
                            atol=1e-12, rtol=0)

    def test_running_stats_momentum(self, rng):
        x = rng.standard_normal((4, 2, 4, 4)) + 2.0
        state = T.BatchNormState(2, momentum=0.9, dtype=np.float64)
        T.batchnorm(leaf(x), leaf(np.ones(2)), leaf(np.zeros(2)), state, train=True)
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        npt.assert_allclose(state.running_mean, 0.1 * mu, rtol=1e-12)
        npt.assert_allclose(state.running_var, 0.9 * 1.0 + 0.1 * var, rtol=1e-12)

    def test_eval_mode_uses_running_stats(self, rng):
        x = rng.standard_normal((2, 2, 3, 3))
        state = T.BatchNormState(2, dtype=np.float64)
        state.running_mean = np.array([1.0, -1.0])
        state.running_var = np.array([4.0, 0.25])
        out = T.batchnorm(leaf(x), leaf(np.ones(2)), leaf(np.zeros(2)), state, train=False)
        expect = (x - state.running_mean[None, :, None, None]) / np.sqrt(
            state.running_var[None, :, None, None] + state.eps)
        npt.assert_allclose(out.data, expect, rtol=1e-12)

    def test_channel_mismatch_rejected(self):
        state = T.BatchNormState(3, dtype=np.float64)
        with pytest.raises(ValueError, match="gamma"):
            T.batchnorm(leaf(np.zeros((1, 2, 4, 4))), leaf(np.ones(3)),
                        leaf(np.zeros(3)), state, train=True)

    def test_tiny_batch_rejected_in_train(self):
        state = T.BatchNormState(1, dtype=np.float64)
        with pytest.raises(ValueError, match="N\\*H\\*W"):
            T.batchnorm(leaf(np.zeros((1, 1, 1, 1))), leaf(np.ones(1)),
                        leaf(np.zeros(1)), state, train=True)


class TestPointwise:
    def test_relu_values(self):
        out = T.relu(leaf(np.array([-1.0, 0.0, 2.0])))
        npt.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_tanh_sigmoid_at_zero(self):
        assert T.tanh(leaf([0.0])).item() == 0.0
        assert T.sigmoid(leaf([0.0])).item() == 0.5

    def test_sigmoid_stable_at_large_inputs(self):
        out = T.sigmoid(leaf([-1000.0, 1000.0]))
        npt.assert_allclose(out.data, [0.0, 1.0], atol=1e-12)

    def test_pointwise_dispatch(self):
        x = leaf([1.0, -2.0])
        npt.assert_array_equal(T.pointwise("relu", x).data, T.relu(x).data)
        with pytest.raises(ValueError, match="unknown pointwise"):
            T.pointwise("gelu", x)


class TestChannelScale:
    def test_ones_identity(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        out = T.channel_scale(leaf(x), leaf(np.ones(3)))
        npt.assert_array_equal(out.data, x)

    def test_zeros_kill_signal(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        out = T.channel_scale(leaf(x), leaf(np.zeros(3)))
        npt.assert_array_equal(out.data, np.zeros_like(x))

    def test_matches_loop_oracle(self, rng):
        x = rng.standard_normal((2, 3, 4, 5))
        a = rng.standard_normal(3)
        out = T.channel_scale(leaf(x), leaf(a))
        expect = np.empty_like(x)
        for c in range(3):
            expect[:, c] = a[c] * x[:, c]
        npt.assert_allclose(out.data, expect, rtol=0, atol=0)

    def test_wrong_length_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            T.channel_scale(leaf(np.zeros((1, 3, 2, 2))), leaf(np.ones(4)))


class TestLinearAndPooling:
    def test_fc_identity(self, rng):
        x = rng.standard_normal((3, 4))
        out = T.fully_connected(leaf(x), leaf(np.eye(4)), leaf(np.zeros(4)))
        npt.assert_allclose(out.data, x, rtol=1e-15)

    def test_fc_matches_matmul(self, rng):
        x, w, b = rng.standard_normal((5, 7)), rng.standard_normal((3, 7)), rng.standard_normal(3)
        out = T.fully_connected(leaf(x), leaf(w), leaf(b))
        npt.assert_allclose(out.data, x @ w.T + b, rtol=1e-14)

    def test_fc_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match=r"feature size 5 != weight in-size 4"):
            T.fully_connected(leaf(np.zeros((2, 5))), leaf(np.zeros((3, 4))), leaf(np.zeros(3)))

    def test_global_avgpool_constant(self):
        out = T.global_avgpool(leaf(np.full((2, 3, 4, 4), 7.0)))
        npt.assert_array_equal(out.data, np.full((2, 3), 7.0))

    def test_maxpool_values(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        out = T.maxpool(leaf(x), k=2, stride=2)
        npt.assert_array_equal(out.data, [[[[5.0, 7.0], [13.0, 15.0]]]])

    def test_maxpool_padded_resnet_stem_shape(self, rng):
        x = leaf(rng.standard_normal((1, 2, 112, 112)))
        out = T.maxpool(x, k=3, stride=2, pad=1)
        assert out.shape == (1, 2, 56, 56)

    def test_maxpool_overlapping_matches_loops(self, rng):
        x = rng.standard_normal((2, 2, 7, 7))
        out = T.maxpool(leaf(x), k=3, stride=2)
        for b in range(2):
            for c in range(2):
                for i in range(3):
                    for j in range(3):
                        win = x[b, c, i * 2:i * 2 + 3, j * 2:j * 2 + 3]
                        assert out.data[b, c, i, j] == win.max()


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        out = T.softmax_cross_entropy(leaf(np.zeros((3, 4))), np.array([0, 1, 3]))
        npt.assert_allclose(out.item(), np.log(4.0), rtol=1e-12)

    def test_saturated_correct_prediction(self):
        logits = np.zeros((1, 5))
        logits[0, 2] = 1000.0
        out = T.softmax_cross_entropy(leaf(logits), np.array([2]))
        assert out.item() < 1e-8

    def test_label_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="out of range"):
            T.softmax_cross_entropy(leaf(np.zeros((2, 3))), np.array([0, 3]))
        with pytest.raises(ValueError, match="out of range"):
            T.softmax_cross_entropy(leaf(np.zeros((2, 3))), np.array([-1, 0]))

    def test_matches_naive_formula(self, rng):
        logits = rng.standard_normal((6, 9)) * 4.0
        labels = rng.integers(0, 9, size=6)
        out = T.softmax_cross_entropy(leaf(logits), labels)
        p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        expect = -np.log(p[np.arange(6), labels]).mean()
        npt.assert_allclose(out.item(), expect, rtol=1e-12)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = leaf(rng.standard_normal((3, 4, 2)))
        T.tensor_sum(x).backward()
        npt.assert_array_equal(x.grad, np.ones_like(x.data))

    def test_two_heads_add_their_gradients(self, rng):
        """Shared node feeding two losses accumulates the sum of both grads."""
        xv = rng.standard_normal((4, 3))
        w1, w2 = rng.standard_normal((2, 3)), rng.standard_normal((5, 3))

        x = leaf(xv)
        l1 = T.tensor_sum(T.fully_connected(x, leaf(w1), leaf(np.zeros(2))))
        l2 = T.tensor_sum(T.fully_connected(x, leaf(w2), leaf(np.zeros(5))))
        T.add(l1, l2).backward()
        joint = x.grad.copy()

        grads = []
        for w, k in ((w1, 2), (w2, 5)):
            x = leaf(xv)
            T.tensor_sum(T.fully_connected(x, leaf(w), leaf(np.zeros(k)))).backward()
            grads.append(x.grad.copy())
        npt.assert_array_equal(joint, grads[0] + grads[1])

    def test_backward_requires_scalar(self, rng):
        x = leaf(rng.standard_normal((2, 2)))
        with pytest.raises(ValueError, match="scalar"):
            T.add(x, x).backward()

    def test_each_node_visited_once(self):
        # x reused 4 ways through a diamond; each pass contributes exactly once
        x = leaf(np.array([3.0]))
        a = T.add(x, x)
        b = T.mul(a, a)
        T.tensor_sum(b).backward()
        # d/dx (2x)^2 = 8x = 24
        npt.assert_allclose(x.grad, [24.0], rtol=1e-15)

    def test_grad_shapes_match_values(self, rng):
        x = leaf(rng.standard_normal((2, 3, 5, 5)))
        w = leaf(rng.standard_normal((4, 3, 3, 3)))
        T.tensor_sum(T.relu(T.conv2d(x, w, stride=1, pad=1))).backward()
        assert x.grad.shape == x.shape
        assert w.grad.shape == w.shape


class TestDtypeAndDebug:
    def test_mixed_dtypes_rejected(self):
        a = Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
        b = Tensor(np.zeros(3, dtype=np.float64), requires_grad=True)
        with pytest.raises(TypeError, match="mixed dtypes"):
            T.add(a, b)

    def test_int_input_promoted_to_float32(self):
        t = Tensor([1, 2, 3])
        assert t.dtype == np.float32

    def test_finite_forward_on_finite_input(self, rng):
        x = leaf(rng.standard_normal((2, 3, 8, 8)) * 50.0)
        w = leaf(rng.standard_normal((4, 3, 3, 3)))
        out = T.relu(T.conv2d(x, w, pad=1))
        out = T.global_avgpool(out)
        assert np.all(np.isfinite(out.data))

    def test_debug_mode_catches_nonfinite(self):
        x = Tensor(np.array([1e308]), dtype=np.float64, requires_grad=True)
        with pytest.raises(FloatingPointError, match="mul"):
            T.mul(x, x)


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 5))
@settings(max_examples=25, deadline=None)
def test_add_commutes_and_matches_numpy(n, c, hw):
    rng = np.random.default_rng(n * 100 + c * 10 + hw)
    a = rng.standard_normal((n, c, hw, hw))
    b = rng.standard_normal((n, c, hw, hw))
    out = T.add(leaf(a), leaf(b))
    npt.assert_array_equal(out.data, a + b)
    npt.assert_array_equal(out.data, T.add(leaf(b), leaf(a)).data)


@given(st.integers(2, 6), st.integers(2, 8))
@settings(max_examples=20, deadline=None)
def test_softmax_ce_uniform_is_log_k(n, k):
    loss = T.softmax_cross_entropy(leaf(np.zeros((n, k))), np.zeros(n, dtype=int))
    npt.assert_allclose(loss.item(), np.log(k), rtol=1e-12)
