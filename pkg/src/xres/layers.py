"""Parameterized layers: thin wrappers that own tensors and call core ops.

Every layer yields `ParamInfo` records describing how its tensors are
initialized (Gaussian with a fan pair, ones, zeros) and whether weight decay
applies. Composite modules chain their children's records under a path
prefix, which is also the parameter naming scheme used by checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = ["ParamInfo", "Conv2d", "BatchNorm2d", "Linear", "ChannelScale", "prefixed"]


@dataclass
class ParamInfo:
    name: str
    tensor: Tensor
    decay: bool            # weight decay applies (conv/fc weights, scaling vectors)
    init: str              # "gaussian" | "ones" | "zeros"
    fan: tuple | None = None  # (fan_in, fan_out) for gaussian init


def prefixed(prefix, infos):
    for info in infos:
        yield ParamInfo(f"{prefix}.{info.name}", info.tensor, info.decay,
                        info.init, info.fan)


class Conv2d:
    """Bias-free convolution (a BN follows every conv in this codebase)."""

    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int = 1,
                 pad: int = 0, dtype=np.float32):
        self.w = Tensor(np.zeros((out_ch, in_ch, k, k), dtype=dtype), requires_grad=True)
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        return T.conv2d(x, self.w, stride=self.stride, pad=self.pad)

    def params(self):
        out_ch, in_ch, kh, kw = self.w.shape
        yield ParamInfo("w", self.w, True, "gaussian",
                        (in_ch * kh * kw, out_ch * kh * kw))

    def buffers(self):
        return iter(())


class BatchNorm2d:
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5,
                 dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.state = T.BatchNormState(channels, momentum=momentum, eps=eps, dtype=dtype)

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        return T.batchnorm(x, self.gamma, self.beta, self.state, train)

    def params(self):
        yield ParamInfo("gamma", self.gamma, False, "ones")
        yield ParamInfo("beta", self.beta, False, "zeros")

    def buffers(self):
        yield "running_mean", self.state
        yield "running_var", self.state


class Linear:
    def __init__(self, in_features: int, out_features: int, dtype=np.float32):
        self.w = Tensor(np.zeros((out_features, in_features), dtype=dtype),
                        requires_grad=True)
        self.b = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        return T.fully_connected(x, self.w, self.b)

    def params(self):
        out_f, in_f = self.w.shape
        yield ParamInfo("w", self.w, True, "gaussian", (in_f, out_f))
        yield ParamInfo("b", self.b, False, "zeros")

    def buffers(self):
        return iter(())


class ChannelScale:
    """Per-channel multiplicative weights: exactly `channels` parameters."""

    def __init__(self, channels: int, dtype=np.float32):
        self.a = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        return T.channel_scale(x, self.a)

    def params(self):
        c = self.a.shape[0]
        yield ParamInfo("a", self.a, True, "gaussian", (c, c))

    def buffers(self):
        return iter(())
