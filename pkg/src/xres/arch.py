"""Architecture specs, network construction, initialization, and counting.

A network is a stack of bottleneck stages on a conv stem. Multitask variants
share the trunk through the final stage's stride-2 projection block; that
block's closing BN+ReLU is relocated past the shortcut addition with one copy
per task, and each task then owns `cross_layers` shape-preserving blocks
whose shortcut sums mix the tasks according to the variant:

    x0  identity self connection, no cross connections
    xi  identity self and cross connections
    xs  identity self, learned channelwise scaling on cross connections

Heads are per-task global average pool + fully connected + softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import (
    BottleneckPath,
    CrossResidualBlock,
    IdentityCross,
    ProjectionShortcut,
    ResidualBlock,
    make_cross_weight,
)
from .layers import BatchNorm2d, Conv2d, Linear, ParamInfo, prefixed
from .tensor import Tensor

__all__ = [
    "StageSpec",
    "HeadSpec",
    "ArchSpec",
    "resnet50_spec",
    "mini_spec",
    "Network",
    "VARIANTS",
    "build_network",
    "build_single_task",
    "build_multitask",
    "build_mini",
    "he_init",
    "count_params",
    "param_breakdown",
    "main_path_depth",
]

VARIANTS = ("single", "x0", "xi", "xs")

EXPANSION = 4  # bottleneck output channels = EXPANSION * width


@dataclass(frozen=True)
class StageSpec:
    blocks: int
    width: int
    stride: int


@dataclass(frozen=True)
class HeadSpec:
    name: str
    classes: int


@dataclass(frozen=True)
class ArchSpec:
    stages: tuple
    heads: tuple
    input_channels: int = 3
    input_size: int = 224
    stem_channels: int = 64
    stem_kernel: int = 7
    stem_stride: int = 2
    stem_pool: bool = True
    cross_layers: int = 2

    def validate(self) -> None:
        if not self.stages:
            raise ValueError("arch spec: at least one stage required")
        for i, st in enumerate(self.stages):
            if st.blocks < 1 or st.width < 1 or st.stride < 1:
                raise ValueError(f"arch spec: stage {i}: blocks/width/stride must be positive")
        if not self.heads:
            raise ValueError("arch spec: at least one head required")
        names = [h.name for h in self.heads]
        if len(set(names)) != len(names):
            raise ValueError(f"arch spec: duplicate head names in {names}")
        for h in self.heads:
            if h.classes < 1:
                raise ValueError(f"arch spec: head {h.name!r}: class count must be positive")
        if self.cross_layers < 1:
            raise ValueError("arch spec: cross_layers must be >= 1")
        if self.stem_channels < 1 or self.stem_kernel < 1 or self.stem_stride < 1:
            raise ValueError("arch spec: stem parameters must be positive")

    @property
    def feature_width(self) -> int:
        return self.stages[-1].width * EXPANSION


def resnet50_spec(heads, input_size: int = 224) -> ArchSpec:
    """50-layer bottleneck stack: 7x7/2 stem (64 wide), 3x3/2 max pool,
    stages of 3/4/6/3 blocks at widths 64/128/256/512."""
    return ArchSpec(
        stages=(StageSpec(3, 64, 1), StageSpec(4, 128, 2),
                StageSpec(6, 256, 2), StageSpec(3, 512, 2)),
        heads=tuple(heads),
        input_size=input_size,
    )


def mini_spec(heads, widths=(16, 32, 64), blocks=(2, 2, 3), input_size: int = 32,
              cross_layers: int = 2) -> ArchSpec:
    """Desk-scale stack for 32x32 inputs: 3x3/1 stem, no pool, three stages.

    The final stage carries 1 + cross_layers blocks so multitask builds can
    share its projection block and give each task `cross_layers` blocks.
    """
    if len(widths) != len(blocks):
        raise ValueError(f"arch spec: widths {widths} and blocks {blocks} differ in length")
    strides = (1,) + (2,) * (len(widths) - 1)
    return ArchSpec(
        stages=tuple(StageSpec(b, w, s) for b, w, s in zip(blocks, widths, strides)),
        heads=tuple(heads),
        input_size=input_size,
        stem_channels=widths[0],
        stem_kernel=3,
        stem_stride=1,
        stem_pool=False,
        cross_layers=cross_layers,
    )


def _make_block(in_ch: int, width: int, stride: int, dtype) -> ResidualBlock:
    out_ch = width * EXPANSION
    shortcut = None
    if stride != 1 or in_ch != out_ch:
        shortcut = ProjectionShortcut(in_ch, out_ch, stride, dtype=dtype)
    return ResidualBlock(BottleneckPath(in_ch, width, out_ch, stride=stride, dtype=dtype),
                         shortcut=shortcut)


class Network:
    """Built network: ordered parameter table plus the execution graph.

    Parameters are registered under path names (stem.*, stageI.blockK.*,
    branch.<task>.*, task.<task>.blockK.*, head.<task>.*); the same names key
    checkpoint records.
    """

    def __init__(self, spec: ArchSpec, variant: str, dtype=np.float32):
        spec.validate()
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
        if variant == "single" and len(spec.heads) != 1:
            raise ValueError(f"single-task build needs exactly one head, got {len(spec.heads)}")
        if variant != "single" and len(spec.heads) < 2:
            raise ValueError(f"multitask build needs >= 2 heads, got {len(spec.heads)}")
        multitask = variant != "single"
        final = spec.stages[-1]
        if multitask and final.blocks != spec.cross_layers + 1:
            raise ValueError(
                f"arch spec: final stage has {final.blocks} blocks; multitask build "
                f"needs 1 shared + cross_layers ({spec.cross_layers}) per-task blocks"
            )

        self.spec = spec
        self.variant = variant
        self.dtype = dtype
        self.task_names = tuple(h.name for h in spec.heads)
        self._params: list[ParamInfo] = []
        self._buffers: list[tuple[str, object]] = []

        self.stem_conv = Conv2d(spec.input_channels, spec.stem_channels,
                                spec.stem_kernel, stride=spec.stem_stride,
                                pad=spec.stem_kernel // 2, dtype=dtype)
        self.stem_bn = BatchNorm2d(spec.stem_channels, dtype=dtype)
        self._register("stem.conv", self.stem_conv)
        self._register("stem.bn", self.stem_bn)

        self.trunk_blocks: list[ResidualBlock] = []
        in_ch = spec.stem_channels
        trunk_stages = spec.stages[:-1] if multitask else spec.stages
        for si, stage in enumerate(trunk_stages):
            for k in range(stage.blocks):
                block = _make_block(in_ch, stage.width, stage.stride if k == 0 else 1, dtype)
                self._register(f"stage{si}.block{k}", block)
                self.trunk_blocks.append(block)
                in_ch = stage.width * EXPANSION

        if not multitask:
            self.branch_path = None
            head = spec.heads[0]
            self.heads = {head.name: Linear(spec.feature_width, head.classes, dtype=dtype)}
            self._register(f"head.{head.name}.fc", self.heads[head.name])
            return

        # shared branch-entry block: closing BN relocated past the addition,
        # then one BN+ReLU copy per task
        si = len(spec.stages) - 1
        out_ch = final.width * EXPANSION
        self.branch_path = BottleneckPath(in_ch, final.width, out_ch,
                                          stride=final.stride,
                                          include_final_bn=False, dtype=dtype)
        self.branch_proj = ProjectionShortcut(in_ch, out_ch, final.stride, dtype=dtype)
        self._register(f"stage{si}.block0.f", self.branch_path)
        self._register(f"stage{si}.block0.proj", self.branch_proj)
        self.branch_bns = {}
        for name in self.task_names:
            bn = BatchNorm2d(out_ch, dtype=dtype)
            self.branch_bns[name] = bn
            self._register(f"branch.{name}.bn", bn)

        self.cross_blocks: list[CrossResidualBlock] = []
        n = len(self.task_names)
        for layer in range(1, spec.cross_layers + 1):
            paths = []
            for name in self.task_names:
                path = BottleneckPath(out_ch, final.width, out_ch, dtype=dtype)
                self._register(f"task.{name}.block{layer}.f", path)
                paths.append(path)
            cross = []
            for t, tname in enumerate(self.task_names):
                row = []
                for j, jname in enumerate(self.task_names):
                    if t == j:
                        row.append(IdentityCross())
                        continue
                    mode = {"x0": "zero", "xi": "identity", "xs": "channel_scale"}[variant]
                    weight = make_cross_weight(mode, out_ch, dtype=dtype)
                    self._register(f"task.{tname}.block{layer}.cross.{jname}", weight)
                    row.append(weight)
                cross.append(row)
            self.cross_blocks.append(CrossResidualBlock(paths, cross))

        self.heads = {}
        for h in spec.heads:
            fc = Linear(spec.feature_width, h.classes, dtype=dtype)
            self.heads[h.name] = fc
            self._register(f"head.{h.name}.fc", fc)

    # -- registration ------------------------------------------------------

    def _register(self, prefix: str, module) -> None:
        for info in prefixed(prefix, module.params()):
            self._params.append(info)
        if hasattr(module, "buffers"):
            for bname, state in module.buffers():
                self._buffers.append((f"{prefix}.{bname}", state))

    @property
    def param_infos(self):
        return tuple(self._params)

    def named_params(self) -> dict:
        return {info.name: info.tensor for info in self._params}

    def zero_grad(self) -> None:
        for info in self._params:
            info.tensor.grad = None

    def state_entries(self) -> dict:
        """Parameters followed by BN running stats, keyed by path name."""
        entries = {info.name: info.tensor.data for info in self._params}
        for name, state in self._buffers:
            field = name.rsplit(".", 1)[-1]
            entries[name] = getattr(state, field)
        return entries

    def load_state_entries(self, entries: dict) -> None:
        own = self.state_entries()
        missing = sorted(set(own) - set(entries))
        extra = sorted(set(entries) - set(own))
        if missing or extra:
            raise ValueError(
                f"state mismatch: missing {missing[:5]}{'...' if len(missing) > 5 else ''}, "
                f"unexpected {extra[:5]}{'...' if len(extra) > 5 else ''}"
            )
        by_name = {info.name: info.tensor for info in self._params}
        for name, arr in entries.items():
            if name in by_name:
                tgt = by_name[name]
                if tuple(arr.shape) != tgt.shape:
                    raise ValueError(f"state entry {name}: shape {arr.shape} != {tgt.shape}")
                tgt.data = arr.astype(tgt.data.dtype)
        for name, state in self._buffers:
            field = name.rsplit(".", 1)[-1]
            arr = entries[name]
            setattr(state, field, arr.astype(getattr(state, field).dtype))

    # -- execution ---------------------------------------------------------

    def forward(self, x: Tensor, train: bool = False) -> dict:
        """Run the graph; returns {task name: logits [N, classes]}."""
        h = T.relu(self.stem_bn(self.stem_conv(x), train))
        if self.spec.stem_pool:
            h = T.maxpool(h, k=3, stride=2, pad=1)
        for block in self.trunk_blocks:
            h = block(h, train)
        if self.variant == "single":
            pooled = T.global_avgpool(h)
            name = self.task_names[0]
            return {name: self.heads[name](pooled)}

        s = T.add(self.branch_path(h, train), self.branch_proj(h, train))
        xs = [T.relu(self.branch_bns[name](s, train)) for name in self.task_names]
        for xblock in self.cross_blocks:
            xs = xblock(xs, train)
        return {name: self.heads[name](T.global_avgpool(x))
                for name, x in zip(self.task_names, xs)}


def build_network(spec: ArchSpec, variant: str, dtype=np.float32) -> Network:
    return Network(spec, variant, dtype=dtype)


def build_single_task(spec: ArchSpec, dtype=np.float32) -> Network:
    return Network(spec, "single", dtype=dtype)


def build_multitask(spec: ArchSpec, variant: str, dtype=np.float32) -> Network:
    if variant not in ("x0", "xi", "xs"):
        raise ValueError(f"multitask variant must be x0/xi/xs, got {variant!r}")
    return Network(spec, variant, dtype=dtype)


def build_mini(spec: ArchSpec, variant: str, dtype=np.float32) -> Network:
    if spec.input_size != 32:
        raise ValueError(f"mini build expects 32x32 input, got {spec.input_size}")
    return Network(spec, variant, dtype=dtype)


def he_init(net: Network, seed: int) -> Network:
    """Gaussian init with std sqrt(2 / n_l), n_l the mean of a layer's input
    and output unit counts; BN scale 1 / shift 0; biases 0. Deterministic in
    the seed (single stream, fixed registration order)."""
    rng = np.random.default_rng(seed)
    for info in net.param_infos:
        t = info.tensor
        if info.init == "gaussian":
            fan_in, fan_out = info.fan
            std = np.sqrt(2.0 / ((fan_in + fan_out) / 2.0))
            t.data = (rng.standard_normal(t.shape) * std).astype(t.data.dtype)
        elif info.init == "ones":
            t.data = np.ones(t.shape, dtype=t.data.dtype)
        else:
            t.data = np.zeros(t.shape, dtype=t.data.dtype)
    return net


def count_params(net: Network) -> int:
    """Learnable tensor entries; BN running statistics are excluded."""
    return sum(info.tensor.data.size for info in net.param_infos)


def param_breakdown(net: Network) -> list:
    """(group, parameter count) pairs in registration order."""
    groups: dict[str, int] = {}
    for info in net.param_infos:
        parts = info.name.split(".")
        group = ".".join(parts[:2]) if parts[0] in ("task", "head", "branch") else parts[0]
        groups[group] = groups.get(group, 0) + info.tensor.data.size
    return list(groups.items())


def main_path_depth(net: Network) -> int:
    """Weighted-layer depth along one head's path: convs on the main path
    (shortcut projections excluded) plus the final fc."""
    depth = 1  # stem conv
    for block in net.trunk_blocks:
        depth += 3
    if net.variant != "single":
        depth += 3  # shared branch-entry block
        depth += 3 * net.spec.cross_layers  # one task's blocks
    return depth + 1  # fc
