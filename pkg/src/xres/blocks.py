"""Residual building blocks and the gated layers they reduce to.

The shortcut algebra implemented here, with `f` the weighted path and the
shortcut carrying the input:

    residual:        y = post( f(x) + shortcut(x) )
    cross-residual:  y_t = post( f_t(x_t) + sum_j w_{j->t}(x_j) )

With one task and an identity self connection the cross form runs the exact
op sequence of the plain residual block, so their outputs are bitwise equal;
the gated layers (highway, ungated feed-forward LSTM) reduce the same way
when their gates are forced on.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import BatchNorm2d, ChannelScale, Conv2d, Linear, ParamInfo, prefixed
from .tensor import Tensor

__all__ = [
    "BottleneckPath",
    "ProjectionShortcut",
    "ResidualBlock",
    "make_cross_weight",
    "ZeroCross",
    "IdentityCross",
    "ScaleCross",
    "CrossResidualBlock",
    "AffineMap",
    "HighwayLayer",
    "LSTMFeedForwardCell",
    "CROSS_MODES",
]


class BottleneckPath:
    """1x1 -> BN -> ReLU -> 3x3 -> BN -> ReLU -> 1x1 [-> BN] weighted path.

    The stride sits on the 3x3. `include_final_bn=False` drops the closing
    BN; a multitask branch entry relocates it past the shortcut addition.
    """

    def __init__(self, in_ch: int, width: int, out_ch: int, stride: int = 1,
                 include_final_bn: bool = True, dtype=np.float32):
        self.conv1 = Conv2d(in_ch, width, 1, dtype=dtype)
        self.bn1 = BatchNorm2d(width, dtype=dtype)
        self.conv2 = Conv2d(width, width, 3, stride=stride, pad=1, dtype=dtype)
        self.bn2 = BatchNorm2d(width, dtype=dtype)
        self.conv3 = Conv2d(width, out_ch, 1, dtype=dtype)
        self.bn3 = BatchNorm2d(out_ch, dtype=dtype) if include_final_bn else None

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        h = T.relu(self.bn1(self.conv1(x), train))
        h = T.relu(self.bn2(self.conv2(h), train))
        h = self.conv3(h)
        if self.bn3 is not None:
            h = self.bn3(h, train)
        return h

    def _children(self):
        pairs = [("conv1", self.conv1), ("bn1", self.bn1), ("conv2", self.conv2),
                 ("bn2", self.bn2), ("conv3", self.conv3)]
        if self.bn3 is not None:
            pairs.append(("bn3", self.bn3))
        return pairs

    def params(self):
        for name, child in self._children():
            yield from prefixed(name, child.params())

    def buffers(self):
        for name, child in self._children():
            for bname, state in child.buffers():
                yield f"{name}.{bname}", state


class ProjectionShortcut:
    """1x1 convolution + BN; used exactly where stride or width changes."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, dtype=np.float32):
        self.conv = Conv2d(in_ch, out_ch, 1, stride=stride, dtype=dtype)
        self.bn = BatchNorm2d(out_ch, dtype=dtype)

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        return self.bn(self.conv(x), train)

    def params(self):
        yield from prefixed("conv", self.conv.params())
        yield from prefixed("bn", self.bn.params())

    def buffers(self):
        for bname, state in self.bn.buffers():
            yield f"bn.{bname}", state


class ResidualBlock:
    """y = post(f(x) + shortcut(x)); shortcut None means identity."""

    def __init__(self, f, shortcut=None, post_activation: str | None = "relu"):
        if post_activation not in (None, "relu"):
            raise ValueError(f"unsupported post_activation {post_activation!r}")
        self.f = f
        self.shortcut = shortcut
        self.post_activation = post_activation

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        fy = self.f(x, train)
        if self.shortcut is None:
            if fy.shape != x.shape:
                raise ValueError(
                    f"identity shortcut needs matching shapes, got path output "
                    f"{fy.shape} vs input {x.shape}"
                )
            y = T.add(fy, x)
        else:
            y = T.add(fy, self.shortcut(x, train))
        if self.post_activation == "relu":
            y = T.relu(y)
        return y

    def params(self):
        yield from prefixed("f", self.f.params())
        if self.shortcut is not None:
            yield from prefixed("proj", self.shortcut.params())

    def buffers(self):
        for name, state in self.f.buffers():
            yield f"f.{name}", state
        if self.shortcut is not None:
            for name, state in self.shortcut.buffers():
                yield f"proj.{name}", state


# ---------------------------------------------------------------------------
# cross-task shortcut weights


class ZeroCross:
    """Absent connection: contributes nothing."""

    def apply(self, x: Tensor) -> Tensor | None:
        return None

    def params(self):
        return iter(())


class IdentityCross:
    def apply(self, x: Tensor) -> Tensor:
        return x

    def params(self):
        return iter(())


class ScaleCross:
    """Channelwise scaling weight a ⊙ x on a cross connection."""

    def __init__(self, channels: int, dtype=np.float32):
        self.scale = ChannelScale(channels, dtype=dtype)

    def apply(self, x: Tensor) -> Tensor:
        return self.scale(x)

    def params(self):
        yield from self.scale.params()


CROSS_MODES = ("zero", "identity", "channel_scale", "projection")


def make_cross_weight(mode: str, channels: int, dtype=np.float32):
    if mode == "zero":
        return ZeroCross()
    if mode == "identity":
        return IdentityCross()
    if mode == "channel_scale":
        return ScaleCross(channels, dtype=dtype)
    if mode == "projection":
        raise NotImplementedError(
            "projection cross weights are a declared extension point, not implemented"
        )
    raise ValueError(f"unknown cross-weight mode {mode!r}; choose from {CROSS_MODES}")


class CrossResidualBlock:
    """N task paths whose shortcut sums mix the tasks' block inputs.

    `cross[t][j]` weights the contribution of task j's input to task t's
    output. The reference configuration keeps identity on the self entries
    (t == t). All task inputs must share one shape; a weight whose mode
    cannot map that shape (identity across a channel change) fails at the
    addition with a shape diagnostic.
    """

    def __init__(self, paths, cross, post_activation: str | None = "relu"):
        n = len(paths)
        if n < 1:
            raise ValueError("need at least one task path")
        if len(cross) != n or any(len(row) != n for row in cross):
            raise ValueError(f"cross-weight matrix must be {n}x{n}")
        if post_activation not in (None, "relu"):
            raise ValueError(f"unsupported post_activation {post_activation!r}")
        self.paths = list(paths)
        self.cross = [list(row) for row in cross]
        self.post_activation = post_activation

    @property
    def task_count(self) -> int:
        return len(self.paths)

    def __call__(self, xs, train: bool = False):
        n = self.task_count
        if len(xs) != n:
            raise ValueError(f"expected {n} task inputs, got {len(xs)}")
        shape = xs[0].shape
        for i, x in enumerate(xs[1:], start=1):
            if x.shape != shape:
                raise ValueError(
                    f"task inputs must share one shape, got {shape} vs {x.shape} (task {i})"
                )
        ys = []
        for t in range(n):
            acc = self.paths[t](xs[t], train)
            for j in range(n):
                term = self.cross[t][j].apply(xs[j])
                if term is not None:
                    acc = T.add(acc, term)
            if self.post_activation == "relu":
                acc = T.relu(acc)
            ys.append(acc)
        return ys

    def params(self):
        for t, path in enumerate(self.paths):
            yield from prefixed(f"task{t}.f", path.params())
        for t, row in enumerate(self.cross):
            for j, weight in enumerate(row):
                yield from prefixed(f"task{t}.cross{j}", weight.params())

    def buffers(self):
        for t, path in enumerate(self.paths):
            for name, state in path.buffers():
                yield f"task{t}.f.{name}", state


# ---------------------------------------------------------------------------
# gated layers the residual family reduces to


class AffineMap:
    """Square W x + b on [N, D] features with an optional nonlinearity."""

    def __init__(self, dim: int, activation: str | None = None, dtype=np.float32):
        if activation not in (None, "relu", "tanh", "sigmoid"):
            raise ValueError(f"unsupported activation {activation!r}")
        self.linear = Linear(dim, dim, dtype=dtype)
        self.activation = activation

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        h = self.linear(x)
        if self.activation is not None:
            h = T.pointwise(self.activation, h)
        return h

    def params(self):
        yield from prefixed("linear", self.linear.params())

    def buffers(self):
        return iter(())


def _gated(value: Tensor, gate_map, x: Tensor, mode: str, train: bool):
    if mode == "on":
        return value
    if mode == "off":
        return None
    if mode == "learned":
        return T.mul(value, gate_map(x, train))
    raise ValueError(f"gate mode must be learned/on/off, got {mode!r}")


class HighwayLayer:
    """y = H(x) * T(x) + x * C(x) with sigmoid transform and carry gates.

    Gates can be forced fully on or off; forcing both on removes the gating
    and leaves H(x) + x, the plain residual form.
    """

    def __init__(self, dim: int, h_activation: str | None = "tanh", dtype=np.float32):
        self.h = AffineMap(dim, h_activation, dtype=dtype)
        self.transform = AffineMap(dim, "sigmoid", dtype=dtype)
        self.carry = AffineMap(dim, "sigmoid", dtype=dtype)

    def __call__(self, x: Tensor, train: bool = False,
                 transform_gate: str = "learned", carry_gate: str = "learned") -> Tensor:
        terms = []
        t_term = _gated(self.h(x, train), self.transform, x, transform_gate, train)
        if t_term is not None:
            terms.append(t_term)
        c_term = _gated(x, self.carry, x, carry_gate, train)
        if c_term is not None:
            terms.append(c_term)
        if not terms:
            return Tensor(np.zeros(x.shape, dtype=x.data.dtype))
        out = terms[0]
        for term in terms[1:]:
            out = T.add(out, term)
        return out

    def params(self):
        yield from prefixed("h", self.h.params())
        yield from prefixed("t", self.transform.params())
        yield from prefixed("c", self.carry.params())

    def buffers(self):
        return iter(())


class LSTMFeedForwardCell:
    """Single LSTM step with recurrent terms dropped.

    c = f(x) * c_prev + i(x) * tanh(W_xc x + b_c);  h = o(x) * tanh(c).
    With gates forced on (i = f = o = 1) the cell state is the residual
    form c = tanh(W_xc x + b_c) + c_prev.
    """

    def __init__(self, dim: int, dtype=np.float32):
        self.gate_i = AffineMap(dim, "sigmoid", dtype=dtype)
        self.gate_f = AffineMap(dim, "sigmoid", dtype=dtype)
        self.gate_o = AffineMap(dim, "sigmoid", dtype=dtype)
        self.candidate = AffineMap(dim, "tanh", dtype=dtype)

    def __call__(self, x: Tensor, c_prev: Tensor, train: bool = False,
                 gates: str = "learned"):
        if x.shape != c_prev.shape:
            raise ValueError(f"x and c_prev must match, got {x.shape} vs {c_prev.shape}")
        cand = self.candidate(x, train)
        if gates == "forced_on":
            c = T.add(cand, c_prev)
            h = T.tanh(c)
        elif gates == "learned":
            c = T.add(T.mul(self.gate_f(x, train), c_prev),
                      T.mul(self.gate_i(x, train), cand))
            h = T.mul(self.gate_o(x, train), T.tanh(c))
        else:
            raise ValueError(f"gates must be learned or forced_on, got {gates!r}")
        return c, h

    def params(self):
        yield from prefixed("i", self.gate_i.params())
        yield from prefixed("f", self.gate_f.params())
        yield from prefixed("o", self.gate_o.params())
        yield from prefixed("c", self.candidate.params())

    def buffers(self):
        return iter(())
