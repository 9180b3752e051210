"""Dense tensors with reverse-mode automatic differentiation.

A `Tensor` wraps a numpy array and doubles as a node in a dynamically built
computation graph: every op records, for each parent that requires grad, a
vector-Jacobian closure. `Tensor.backward()` on a scalar walks the graph once
in reverse topological order and accumulates gradients on the leaves.

Only float32 and float64 are supported. float64 exists for verification
(finite-difference checks); training runs in float32. Image data uses the
N x C x H x W layout throughout.

Set the environment variable XRES_DEBUG=1 (or call `set_debug(True)`) to make
every forward op assert that its output is finite.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "Tensor",
    "add",
    "mul",
    "relu",
    "tanh",
    "sigmoid",
    "pointwise",
    "conv2d",
    "BatchNormState",
    "batchnorm",
    "channel_scale",
    "fully_connected",
    "maxpool",
    "global_avgpool",
    "softmax_cross_entropy",
    "tensor_sum",
    "set_debug",
    "debug_enabled",
]

_FLOAT_DTYPES = (np.float32, np.float64)

_debug_finite = os.environ.get("XRES_DEBUG", "") not in ("", "0")


def set_debug(on: bool) -> None:
    """Toggle the finite-output check run after every forward op."""
    global _debug_finite
    _debug_finite = bool(on)


def debug_enabled() -> bool:
    return _debug_finite


class Tensor:
    """Numpy-backed array node; shape/dtype come from `.data`.

    `requires_grad` marks leaves whose gradient should be accumulated; op
    outputs require grad iff any parent does. `.grad` is populated (same
    shape as `.data`) by `backward()` and is None before that.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_op")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(op={self._op}, shape={self.shape}, dtype={self.data.dtype})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable leaf.

        Each node is visited exactly once, in reverse topological order.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar, got shape {self.shape}"
            )
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in node._parents:
                contrib = vjp(g)
                if parent.grad is None:
                    parent.grad = contrib
                else:
                    parent.grad = parent.grad + contrib


def _toposort(root: Tensor) -> list:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _result(data: np.ndarray, parents, op: str) -> Tensor:
    if _debug_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values in output of {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = bool(parents)
    out._parents = tuple(parents)
    out._op = op
    return out


def _check_dtype(op: str, *tensors: Tensor) -> None:
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise TypeError(
                f"{op}: mixed dtypes {dt} and {t.data.dtype}; cast inputs first"
            )


# ---------------------------------------------------------------------------
# elementwise ops


def add(x: Tensor, y: Tensor) -> Tensor:
    _check_dtype("add", x, y)
    if x.shape != y.shape:
        raise ValueError(f"add: shape mismatch {x.shape} vs {y.shape}")
    parents = []
    if x.requires_grad:
        parents.append((x, lambda g: g))
    if y.requires_grad:
        parents.append((y, lambda g: g))
    return _result(x.data + y.data, parents, "add")


def mul(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise product (used by gated layers)."""
    _check_dtype("mul", x, y)
    if x.shape != y.shape:
        raise ValueError(f"mul: shape mismatch {x.shape} vs {y.shape}")
    parents = []
    if x.requires_grad:
        parents.append((x, lambda g: g * y.data))
    if y.requires_grad:
        parents.append((y, lambda g: g * x.data))
    return _result(x.data * y.data, parents, "mul")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    parents = []
    if x.requires_grad:
        mask = x.data > 0
        parents.append((x, lambda g: g * mask))
    return _result(out, parents, "relu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    parents = []
    if x.requires_grad:
        parents.append((x, lambda g: g * (1.0 - out * out)))
    return _result(out, parents, "tanh")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    out[~pos] = e / (1.0 + e)
    parents = []
    if x.requires_grad:
        parents.append((x, lambda g: g * out * (1.0 - out)))
    return _result(out, parents, "sigmoid")


_POINTWISE = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}


def pointwise(op: str, x: Tensor) -> Tensor:
    """Apply one of the supported elementwise nonlinearities by name."""
    try:
        fn = _POINTWISE[op]
    except KeyError:
        raise ValueError(f"unknown pointwise op {op!r}; choose from {sorted(_POINTWISE)}")
    return fn(x)


def tensor_sum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)
    parents = []
    if x.requires_grad:
        parents.append((x, lambda g: np.broadcast_to(g, x.shape).astype(x.data.dtype)))
    return _result(out, parents, "sum")


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(dcols: np.ndarray, xp_shape: tuple, kh: int, kw: int,
            stride: int, ho: int, wo: int, pad: int) -> np.ndarray:
    n, c = xp_shape[:2]
    dcols = dcols.reshape(n, c, kh, kw, ho, wo)
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
    if pad:
        return dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with OIHW weights, no bias.

    Output spatial size is floor((H + 2*pad - kh)/stride) + 1.
    """
    _check_dtype("conv2d", x, w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d: need 4-d input and weight, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ValueError(
            f"conv2d: input channels {cin} != weight in-channels {cin_w} "
            f"(input {x.shape}, weight {w.shape})"
        )
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ValueError(
            f"conv2d: kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * pad}x{wd + 2 * pad}"
        )
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wflat = w.data.reshape(cout, -1)
    out = np.matmul(wflat, cols).reshape(n, cout, ho, wo)

    parents = []
    if w.requires_grad:
        def vjp_w(g, cols=cols, shape=w.shape):
            gf = g.reshape(n, cout, ho * wo)
            return np.matmul(gf, cols.transpose(0, 2, 1)).sum(axis=0).reshape(shape)
        parents.append((w, vjp_w))
    if x.requires_grad:
        xp_shape = xp.shape

        def vjp_x(g, wflat=wflat):
            gf = g.reshape(n, cout, ho * wo)
            dcols = np.matmul(wflat.T, gf)
            return _col2im(dcols, xp_shape, kh, kw, stride, ho, wo, pad)
        parents.append((x, vjp_x))
    return _result(out, parents, "conv2d")


# ---------------------------------------------------------------------------
# batch normalization


class BatchNormState:
    """Running statistics for one BN layer.

    `momentum` is the retained fraction of the old running value. The running
    variance is stored in the biased (population) form, i.e. the same
    statistic the train-mode normalization divides by.
    """

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5,
                 dtype=np.float32):
        self.momentum = momentum
        self.eps = eps
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        m = self.momentum
        self.running_mean = (m * self.running_mean + (1.0 - m) * mean).astype(self.running_mean.dtype)
        self.running_var = (m * self.running_var + (1.0 - m) * var).astype(self.running_var.dtype)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
              train: bool) -> Tensor:
    """Per-channel batch normalization over the N, H, W axes.

    Train mode normalizes with batch statistics and folds them into the
    running estimates; eval mode normalizes with the running estimates.
    """
    _check_dtype("batchnorm", x, gamma, beta)
    if x.data.ndim != 4:
        raise ValueError(f"batchnorm: need 4-d NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"batchnorm: gamma/beta must have shape ({c},), got {gamma.shape} and {beta.shape}"
        )
    eps = state.eps
    if train:
        if n * h * w < 2:
            raise ValueError(f"batchnorm: train mode needs N*H*W >= 2, got {n * h * w}")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        state.update(mean, var)
    else:
        mean = state.running_mean.astype(x.data.dtype)
        var = state.running_var.astype(x.data.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    parents = []
    if gamma.requires_grad:
        parents.append((gamma, lambda g: (g * xhat).sum(axis=(0, 2, 3))))
    if beta.requires_grad:
        parents.append((beta, lambda g: g.sum(axis=(0, 2, 3))))
    if x.requires_grad:
        scale = (gamma.data * inv)[None, :, None, None]
        if train:
            m = float(n * h * w)

            def vjp_x(g):
                gmean = g.mean(axis=(0, 2, 3))[None, :, None, None]
                gxmean = (g * xhat).mean(axis=(0, 2, 3))[None, :, None, None]
                return scale * (g - gmean - xhat * gxmean)
        else:
            def vjp_x(g):
                return scale * g
        parents.append((x, vjp_x))
    return _result(out, parents, "batchnorm")


# ---------------------------------------------------------------------------
# channelwise scaling


def channel_scale(x: Tensor, a: Tensor) -> Tensor:
    """Multiply each channel of an NCHW input by a learned scalar (a ⊙ x)."""
    _check_dtype("channel_scale", x, a)
    if x.data.ndim != 4:
        raise ValueError(f"channel_scale: need 4-d NCHW input, got {x.shape}")
    c = x.shape[1]
    if a.shape != (c,):
        raise ValueError(
            f"channel_scale: scale must have shape ({c},) to match input {x.shape}, got {a.shape}"
        )
    out = x.data * a.data[None, :, None, None]
    parents = []
    if x.requires_grad:
        parents.append((x, lambda g: g * a.data[None, :, None, None]))
    if a.requires_grad:
        parents.append((a, lambda g: (g * x.data).sum(axis=(0, 2, 3))))
    return _result(out, parents, "channel_scale")


# ---------------------------------------------------------------------------
# linear / pooling / loss


def fully_connected(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x[N,D] @ w[K,D]^T + b[K] -> [N,K]."""
    _check_dtype("fully_connected", x, w, b)
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ValueError(f"fully_connected: need 2-d input/weight, got {x.shape} and {w.shape}")
    n, d = x.shape
    k, d_w = w.shape
    if d != d_w:
        raise ValueError(
            f"fully_connected: feature size {d} != weight in-size {d_w} "
            f"(input {x.shape}, weight {w.shape})"
        )
    if b.shape != (k,):
        raise ValueError(f"fully_connected: bias must have shape ({k},), got {b.shape}")
    out = x.data @ w.data.T + b.data
    parents = []
    if x.requires_grad:
        parents.append((x, lambda g: g @ w.data))
    if w.requires_grad:
        parents.append((w, lambda g: g.T @ x.data))
    if b.requires_grad:
        parents.append((b, lambda g: g.sum(axis=0)))
    return _result(out, parents, "fully_connected")


def maxpool(x: Tensor, k: int, stride: int, pad: int = 0) -> Tensor:
    """Max pooling with -inf padding; ties resolve to the first window slot."""
    if x.data.ndim != 4:
        raise ValueError(f"maxpool: need 4-d NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ValueError(f"maxpool: window {k} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    xp = x.data
    if pad:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)),
                    constant_values=-np.inf)
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    s = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, ho, wo, k, k),
        strides=(s[0], s[1], s[2] * stride, s[3] * stride, s[2], s[3]),
    ).reshape(n, c, ho, wo, k * k)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    parents = []
    if x.requires_grad:
        def vjp_x(g):
            dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
            ni, ci, oi, oj = np.ogrid[:n, :c, :ho, :wo]
            rows = oi * stride + idx // k
            cols = oj * stride + idx % k
            np.add.at(dxp, (ni, ci, rows, cols), g)
            if pad:
                return dxp[:, :, pad:-pad, pad:-pad]
            return dxp
        parents.append((x, vjp_x))
    return _result(out, parents, "maxpool")


def global_avgpool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: [N,C,H,W] -> [N,C]."""
    if x.data.ndim != 4:
        raise ValueError(f"global_avgpool: need 4-d NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    parents = []
    if x.requires_grad:
        inv = 1.0 / (h * w)
        parents.append((x, lambda g: np.broadcast_to(
            (g * inv)[:, :, None, None], (n, c, h, w)).astype(g.dtype)))
    return _result(out, parents, "global_avgpool")


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-stabilized."""
    if logits.data.ndim != 2:
        raise ValueError(f"softmax_cross_entropy: need 2-d logits, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(
            f"softmax_cross_entropy: labels must have shape ({n},), got {labels.shape}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise ValueError(f"softmax_cross_entropy: label {bad} out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(denom)
    rows = np.arange(n)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=logits.data.dtype)

    parents = []
    if logits.requires_grad:
        softmax = ez / denom

        def vjp(g):
            d = softmax.copy()
            d[rows, labels] -= 1.0
            return d * (g / n)
        parents.append((logits, vjp))
    return _result(loss, parents, "softmax_cross_entropy")
