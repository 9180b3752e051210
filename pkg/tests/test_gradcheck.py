"""Finite-difference oracle: self-tests and per-op gradient verification."""

import numpy as np
import numpy.testing as npt
import pytest

from xres import tensor as T
from xres.gradcheck import finite_diff_check, relative_error
from xres.tensor import Tensor

from conftest import leaf


class TestCheckerItself:
    def test_linear_function_near_exact(self, rng):
        """Central differences are exact (to rounding) for linear maps."""
        w = leaf(rng.standard_normal(5))
        c = rng.standard_normal(5)

        def f():
            return T.tensor_sum(T.mul(w, Tensor(c, dtype=np.float64, requires_grad=False)))

        assert finite_diff_check(f, [w]) < 1e-10

    def test_composite_conv_relu_fc_ce(self, rng):
        x = Tensor(rng.standard_normal((2, 2, 6, 6)), dtype=np.float64)
        w = leaf(rng.standard_normal((3, 2, 3, 3)) * 0.5)
        fcw = leaf(rng.standard_normal((4, 3)) * 0.5)
        fcb = leaf(rng.standard_normal(4) * 0.1)
        labels = np.array([1, 3])

        def f():
            h = T.relu(T.conv2d(x, w, stride=2, pad=1))
            h = T.global_avgpool(h)
            return T.softmax_cross_entropy(T.fully_connected(h, fcw, fcb), labels)

        assert finite_diff_check(f, [w, fcw, fcb]) < 1e-6

    def test_corrupted_gradient_rule_is_caught(self, rng):
        """Negative control: a wrong vjp must push the error above 1e-2."""
        from xres.tensor import _result

        def bad_square(x):
            out = x.data * x.data
            # deliberately wrong local gradient (3x instead of 2x)
            return _result(out, [(x, lambda g: g * 3.0 * x.data)], "bad_square")

        x = leaf(rng.standard_normal(7) + 2.0)

        def f():
            return T.tensor_sum(bad_square(x))

        assert finite_diff_check(f, [x]) > 1e-2

    def test_rejects_float32_params(self):
        w = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        with pytest.raises(TypeError, match="float64"):
            finite_diff_check(lambda: T.tensor_sum(w), [w])

    def test_relative_error_floor(self):
        assert relative_error(0.0, 0.0) == 0.0
        assert relative_error(1e-12, 0.0) < 1e-3


class TestPerOpGradients:
    """Every differentiable op passes the oracle at < 1e-6 (64-bit)."""

    def test_relu(self, rng):
        # keep inputs away from the kink at 0
        x = leaf(np.sign(rng.standard_normal((3, 4))) * (0.5 + rng.random((3, 4))))
        assert finite_diff_check(lambda: T.tensor_sum(T.relu(x)), [x]) < 1e-6

    def test_tanh(self, rng):
        x = leaf(rng.standard_normal((3, 4)))
        assert finite_diff_check(lambda: T.tensor_sum(T.tanh(x)), [x]) < 1e-6

    def test_sigmoid(self, rng):
        x = leaf(rng.standard_normal((3, 4)))
        assert finite_diff_check(lambda: T.tensor_sum(T.sigmoid(x)), [x]) < 1e-6

    def test_mul(self, rng):
        x = leaf(rng.standard_normal((2, 5)))
        y = leaf(rng.standard_normal((2, 5)))
        assert finite_diff_check(lambda: T.tensor_sum(T.mul(x, y)), [x, y]) < 1e-6

    def test_conv2d(self, rng):
        x = leaf(rng.standard_normal((2, 2, 5, 5)))
        w = leaf(rng.standard_normal((3, 2, 3, 3)))

        def f():
            return T.tensor_sum(T.tanh(T.conv2d(x, w, stride=2, pad=1)))

        assert finite_diff_check(f, [x, w]) < 1e-6

    def test_batchnorm_train_mode(self, rng):
        x = leaf(rng.standard_normal((3, 2, 4, 4)) * 2.0 + 1.0)
        gamma = leaf(0.5 + rng.random(2))
        beta = leaf(rng.standard_normal(2))
        state = T.BatchNormState(2, dtype=np.float64)

        def f():
            out = T.batchnorm(x, gamma, beta, state, train=True)
            return T.tensor_sum(T.tanh(out))

        assert finite_diff_check(f, [x, gamma, beta]) < 1e-6

    def test_batchnorm_eval_mode(self, rng):
        x = leaf(rng.standard_normal((2, 2, 3, 3)))
        gamma = leaf(0.5 + rng.random(2))
        beta = leaf(rng.standard_normal(2))
        state = T.BatchNormState(2, dtype=np.float64)
        state.running_mean = rng.standard_normal(2)
        state.running_var = 0.5 + rng.random(2)

        def f():
            return T.tensor_sum(T.tanh(T.batchnorm(x, gamma, beta, state, train=False)))

        assert finite_diff_check(f, [x, gamma, beta]) < 1e-6

    def test_channel_scale_both_inputs(self, rng):
        x = leaf(rng.standard_normal((2, 3, 4, 4)))
        a = leaf(rng.standard_normal(3))

        def f():
            return T.tensor_sum(T.tanh(T.channel_scale(x, a)))

        assert finite_diff_check(f, [x, a]) < 1e-6

    def test_channel_scale_grad_is_per_channel_correlation(self, rng):
        """d/da of sum(a ⊙ x * u) equals per-channel sum of x * u."""
        xv = rng.standard_normal((2, 3, 4, 4))
        uv = rng.standard_normal((2, 3, 4, 4))
        a = leaf(rng.standard_normal(3))
        x = Tensor(xv, dtype=np.float64)
        u = Tensor(uv, dtype=np.float64)
        T.tensor_sum(T.mul(T.channel_scale(x, a), u)).backward()
        npt.assert_allclose(a.grad, (xv * uv).sum(axis=(0, 2, 3)), rtol=1e-12)

    def test_fully_connected(self, rng):
        x = leaf(rng.standard_normal((3, 4)))
        w = leaf(rng.standard_normal((2, 4)))
        b = leaf(rng.standard_normal(2))

        def f():
            return T.tensor_sum(T.sigmoid(T.fully_connected(x, w, b)))

        assert finite_diff_check(f, [x, w, b]) < 1e-6

    def test_maxpool(self, rng):
        x = leaf(rng.standard_normal((2, 2, 6, 6)))

        def f():
            return T.tensor_sum(T.maxpool(x, k=3, stride=2, pad=1))

        assert finite_diff_check(f, [x]) < 1e-6

    def test_global_avgpool(self, rng):
        x = leaf(rng.standard_normal((2, 3, 5, 5)))
        assert finite_diff_check(lambda: T.tensor_sum(T.global_avgpool(x)), [x]) < 1e-6

    def test_softmax_cross_entropy(self, rng):
        logits = leaf(rng.standard_normal((4, 6)) * 2.0)
        labels = np.array([0, 5, 2, 2])

        def f():
            return T.softmax_cross_entropy(logits, labels)

        assert finite_diff_check(f, [logits]) < 1e-6

    def test_add_linearity_at_shared_node_is_exact(self, rng):
        """Accumulation at the node both losses consume is bitwise additive."""
        xv = rng.standard_normal((3, 3))
        w1, w2 = rng.standard_normal((2, 3)), rng.standard_normal((4, 3))

        def heads(x):
            l1 = T.tensor_sum(T.fully_connected(x, leaf(w1), leaf(np.zeros(2))))
            l2 = T.tensor_sum(T.fully_connected(x, leaf(w2), leaf(np.zeros(4))))
            return l1, l2

        x = leaf(xv)
        l1, l2 = heads(x)
        T.add(l1, l2).backward()
        joint = x.grad.copy()

        xa = leaf(xv)
        heads(xa)[0].backward()
        xb = leaf(xv)
        heads(xb)[1].backward()
        npt.assert_array_equal(joint, xa.grad + xb.grad)

    def test_add_linearity_below_shared_node(self, rng):
        """One nonlinearity below the shared node, additivity holds to 1e-14
        relative (float products do not distribute bitwise)."""
        xv = rng.standard_normal((3, 3))

        def build():
            x = leaf(xv)
            a = T.tanh(x)
            return x, T.tensor_sum(a), T.tensor_sum(T.mul(a, a))

        x, l1, l2 = build()
        T.add(l1, l2).backward()
        joint = x.grad.copy()

        x1, l1, _ = build()
        l1.backward()
        x2, _, l2 = build()
        l2.backward()
        npt.assert_allclose(joint, x1.grad + x2.grad, rtol=1e-14, atol=0)
