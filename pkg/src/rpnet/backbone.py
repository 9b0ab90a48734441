"""ENet-style pyramid encoder with residual-feature taps.

The network is a list of :class:`BottleneckSpec` records grouped into pyramid
levels. Inside a level the bottlenecks are pure additive residual units
(``x_{i+1} = x_i + F(x_i)``), so the level's residual feature
``x_L - x_l`` is exactly the sum of its branch outputs.

Parameter names follow ``<section>.<block>.<layer>``, e.g.
``section2.block1.project.conv``. Level membership:

====== ===== ======== ================================
level  scale channels blocks
====== ===== ======== ================================
3      1/2   16       initial, bottleneck1.0
2      1/4   64       bottleneck2.0 .. 2.4
1      1/8   128      bottleneck3.0 .. 3.8, 4.1 .. 4.8
====== ===== ======== ================================
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction

import torch
import torch.nn as nn

from .errors import SizeMismatchError
from .pyramid import upsample_bilinear

REGULAR = "regular"
ASYMMETRIC = "asymmetric"
DOWNSAMPLING = "downsampling"
INITIAL = "initial"
KINDS = (INITIAL, REGULAR, ASYMMETRIC, DOWNSAMPLING)

RESIDUAL_MODES = ("sr", "er")


@dataclass(frozen=True)
class BottleneckSpec:
    name: str
    kind: str
    in_channels: int
    out_channels: int
    dropout_rate: float = 0.0
    level: int = 1
    internal_ratio: int = 4

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown bottleneck kind {self.kind!r}")
        if self.kind in (REGULAR, ASYMMETRIC) and self.in_channels != self.out_channels:
            raise ValueError(f"{self.name}: {self.kind} blocks preserve channels")

    @property
    def section(self) -> str:
        if self.kind == INITIAL:
            return "initial"
        return "section" + self.name.removeprefix("bottleneck").split(".")[0]

    @property
    def block(self) -> str:
        if self.kind == INITIAL:
            return "block0"
        return "block" + self.name.split(".")[1]


def enet_layout(dropout: float = 0.1, early_dropout: float = 0.01) -> list[BottleneckSpec]:
    """Block list of the reproduced ENet encoder with the extra bottleneck1.0."""
    specs = [
        BottleneckSpec("initial", INITIAL, 3, 16, 0.0, level=3),
        BottleneckSpec("bottleneck1.0", REGULAR, 16, 16, early_dropout, level=3),
        BottleneckSpec("bottleneck2.0", DOWNSAMPLING, 16, 64, early_dropout, level=2),
    ]
    specs += [
        BottleneckSpec(f"bottleneck2.{i}", REGULAR, 64, 64, early_dropout, level=2)
        for i in range(1, 5)
    ]
    specs.append(BottleneckSpec("bottleneck3.0", DOWNSAMPLING, 64, 128, dropout, level=1))
    # section 4 is the repeat of section 3 without its downsampling block
    for section in (3, 4):
        for i in range(1, 9):
            kind = ASYMMETRIC if i in (3, 7) else REGULAR
            specs.append(
                BottleneckSpec(f"bottleneck{section}.{i}", kind, 128, 128, dropout, level=1)
            )
    return specs


def _conv_bn(in_ch, out_ch, kernel, stride=1, padding=0, act=True):
    layers = [
        nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=padding, bias=False),
        nn.BatchNorm2d(out_ch),
    ]
    if act:
        layers.append(nn.PReLU(out_ch))
    return nn.Sequential(*layers)


class InitialBlock(nn.Module):
    """3x3/2 convolution concatenated with a 2x2 max-pool of the input."""

    def __init__(self, in_channels=3, out_channels=16):
        super().__init__()
        self.conv = nn.Conv2d(
            in_channels, out_channels - in_channels, 3, stride=2, padding=1, bias=False
        )
        self.pool = nn.MaxPool2d(2)
        self.bn = nn.BatchNorm2d(out_channels)
        self.act = nn.PReLU(out_channels)

    def forward(self, x):
        return self.act(self.bn(torch.cat([self.conv(x), self.pool(x)], dim=1)))


class RegularBottleneck(nn.Module):
    """Additive residual unit; ``branch`` is the learned residual function."""

    def __init__(self, channels, asymmetric=False, dropout=0.0, internal_ratio=4):
        super().__init__()
        internal = channels // internal_ratio
        if asymmetric:
            middle = nn.Sequential(
                nn.Conv2d(internal, internal, (5, 1), padding=(2, 0), bias=False),
                nn.BatchNorm2d(internal),
                nn.PReLU(internal),
                nn.Conv2d(internal, internal, (1, 5), padding=(0, 2), bias=False),
                nn.BatchNorm2d(internal),
                nn.PReLU(internal),
            )
        else:
            middle = _conv_bn(internal, internal, 3, padding=1)
        self.branch = nn.Sequential()
        self.branch.add_module("project", _conv_bn(channels, internal, 1))
        self.branch.add_module("middle", middle)
        self.branch.add_module("expand", _conv_bn(internal, channels, 1, act=False))
        self.branch.add_module("dropout", nn.Dropout2d(dropout))

    def forward(self, x):
        return x + self.branch(x)


class DownsamplingBottleneck(nn.Module):
    """Max-pool main path with zero channel padding plus a strided conv branch.

    The branch opens with a 3x3 stride-2 projection (ENet's original uses a
    2x2 kernel).
    """

    def __init__(self, in_channels, out_channels, dropout=0.0, internal_ratio=4):
        super().__init__()
        if out_channels < in_channels:
            raise ValueError(f"downsampling cannot shrink channels ({in_channels} -> {out_channels})")
        internal = max(1, out_channels // internal_ratio)
        self.extra = out_channels - in_channels
        self.pool = nn.MaxPool2d(2)
        self.branch = nn.Sequential()
        self.branch.add_module("project", _conv_bn(in_channels, internal, 3, stride=2, padding=1))
        self.branch.add_module("middle", _conv_bn(internal, internal, 3, padding=1))
        self.branch.add_module("expand", _conv_bn(internal, out_channels, 1, act=False))
        self.branch.add_module("dropout", nn.Dropout2d(dropout))
        self.act = nn.PReLU(out_channels)

    def forward(self, x):
        main = self.pool(x)
        if self.extra:
            n, _, h, w = main.shape
            main = torch.cat([main, main.new_zeros(n, self.extra, h, w)], dim=1)
        return self.act(main + self.branch(x))


def build_block(spec: BottleneckSpec) -> nn.Module:
    if spec.kind == INITIAL:
        return InitialBlock(spec.in_channels, spec.out_channels)
    if spec.kind == DOWNSAMPLING:
        return DownsamplingBottleneck(
            spec.in_channels, spec.out_channels, spec.dropout_rate, spec.internal_ratio
        )
    return RegularBottleneck(
        spec.in_channels,
        asymmetric=spec.kind == ASYMMETRIC,
        dropout=spec.dropout_rate,
        internal_ratio=spec.internal_ratio,
    )


@dataclass
class LevelTap:
    level: int
    scale: Fraction
    entry: torch.Tensor
    exit: torch.Tensor

    @property
    def residual(self) -> torch.Tensor:
        return self.exit - self.entry


@dataclass
class BackboneOutput:
    main_feature: torch.Tensor
    taps: dict[int, LevelTap] = field(default_factory=dict)
    expanded: dict[int, torch.Tensor] = field(default_factory=dict)

    def residual(self, level: int) -> torch.Tensor:
        """Feature consumed by a level's residual predictor (sr, plus er if present)."""
        res = self.taps[level].residual
        if level in self.expanded:
            res = res + self.expanded[level]
        return res


def expanded_residual(pre_pool, post_pool, project: nn.Module | None = None) -> torch.Tensor:
    """``pre_pool - project(up(post_pool))``: detail lost by a downsampling block."""
    h, w = pre_pool.shape[-2:]
    ph, pw = post_pool.shape[-2:]
    if (h, w) != (2 * ph, 2 * pw):
        raise SizeMismatchError(f"expected a 2x size ratio, got {h}x{w} vs {ph}x{pw}")
    up = upsample_bilinear(post_pool, (h, w))
    if project is not None:
        up = project(up)
    return pre_pool - up


class Backbone(nn.Module):
    """Pyramid encoder.

    Args:
        specs: block list, coarse level last (see :func:`enet_layout`).
        residual_mode: ``"sr"`` for standard residuals, ``"er"`` to also
            expose the pre/post-downsampling difference at every level that
            ends in a downsampling block.
    """

    def __init__(self, specs, residual_mode="sr"):
        super().__init__()
        if residual_mode not in RESIDUAL_MODES:
            raise ValueError(f"residual_mode must be one of {RESIDUAL_MODES}")
        self.specs = [s if isinstance(s, BottleneckSpec) else BottleneckSpec(**s) for s in specs]
        self.residual_mode = residual_mode
        levels = [s.level for s in self.specs]
        if levels != sorted(levels, reverse=True):
            raise ValueError("blocks must be ordered from the finest level to level 1")
        for level in set(levels):
            kinds = [s.kind for s in self.specs if s.level == level]
            entries = [k in (INITIAL, DOWNSAMPLING) for k in kinds]
            if entries != sorted(entries, reverse=True):
                raise ValueError(f"level {level}: entry blocks must precede its residual blocks")
        self.levels = sorted(set(levels), reverse=True)  # e.g. [3, 2, 1]

        sections: dict[str, nn.Module] = {}
        for spec in self.specs:
            sections.setdefault(spec.section, nn.Module())
            sections[spec.section].add_module(spec.block, build_block(spec))
        for name, module in sections.items():
            self.add_module(name, module)

        self.er_project = nn.ModuleDict()
        if residual_mode == "er":
            for level in self.levels[:-1]:
                pre = self._level_specs(level)[-1].out_channels
                post = self._level_specs(level - 1)[0].out_channels
                self.er_project[str(level)] = nn.Conv2d(post, pre, 1)

    def _level_specs(self, level):
        return [s for s in self.specs if s.level == level]

    def block(self, spec: BottleneckSpec) -> nn.Module:
        return getattr(getattr(self, spec.section), spec.block)

    @property
    def main_channels(self) -> int:
        return self.specs[-1].out_channels

    def level_channels(self, level: int) -> int:
        return self._level_specs(level)[-1].out_channels

    def level_parameters(self, level: int):
        for spec in self._level_specs(level):
            yield from self.block(spec).parameters()
        if str(level) in self.er_project:
            yield from self.er_project[str(level)].parameters()

    def forward(self, x) -> BackboneOutput:
        h, w = x.shape[-2:]
        factor = 2 ** sum(s.kind in (INITIAL, DOWNSAMPLING) for s in self.specs)
        if h % factor or w % factor:
            raise SizeMismatchError(
                f"input {h}x{w} must be divisible by {factor}; pad to "
                f"{-(-h // factor) * factor}x{-(-w // factor) * factor}"
            )
        out = BackboneOutput(main_feature=x)
        scale = Fraction(1)
        pending_er = None  # (level, pre-pool feature) awaiting the next level's entry
        for level in self.levels:
            specs = self._level_specs(level)
            for spec in specs:
                if spec.kind in (INITIAL, DOWNSAMPLING):
                    x = self.block(spec)(x)
                    scale /= 2
            if pending_er is not None:
                prev, pre = pending_er
                out.expanded[prev] = expanded_residual(pre, x, self.er_project[str(prev)])
            entry = x
            for spec in specs:
                if spec.kind in (REGULAR, ASYMMETRIC):
                    x = self.block(spec)(x)
            out.taps[level] = LevelTap(level, scale, entry, x)
            pending_er = (level, x) if str(level) in self.er_project else None
        out.main_feature = x
        return out


def build_backbone(residual_mode="sr", dropout=0.1, early_dropout=0.01) -> Backbone:
    return Backbone(enet_layout(dropout, early_dropout), residual_mode)


def specs_to_dicts(specs):
    return [asdict(s) for s in specs]
