"""Crossmodal filter: spatial bottleneck projection plus a widened OCBE.

The projection squeezes the other modality's features through a small
spatial grid and restores them, which keeps normal structure but drops
local anomalies. The widened one-class bottleneck embedding (OCBE) then
compresses own and projected features together into the decoder input.
"""
from __future__ import annotations

import math

import torch
from torch import Tensor, nn

from .exceptions import ConfigError, DimensionError
from .networks import BackboneProfile, check_pyramid, check_same_shapes, conv1x1, conv3x3, deconv2x2


def _down(c: int) -> list[nn.Module]:
    return [conv3x3(c, c, stride=2), nn.BatchNorm2d(c), nn.ReLU()]


def _up(c: int) -> list[nn.Module]:
    return [deconv2x2(c, c), nn.BatchNorm2d(c), nn.ReLU()]


def _n_halvings(size: int, target: int, level: int) -> int:
    if size < target:
        raise ConfigError(f"level {level} is {size}x{size}, smaller than bottleneck size {target}")
    n = int(round(math.log2(size / target)))
    if target * 2 ** n != size:
        raise ConfigError(f"bottleneck size {target} is not reachable from {size} by halving")
    return n


class BottleneckProjection(nn.Module):
    """Per-level compress (strided conv to ``bottleneck_size``) and restore (deconv)."""

    def __init__(self, profile: BackboneProfile, bottleneck_size: int = 8):
        super().__init__()
        self.profile = profile
        self.bottleneck_size = bottleneck_size
        self.compressors = nn.ModuleList()
        self.restorers = nn.ModuleList()
        for i, (c, h, _) in enumerate(profile.level_shapes()):
            n = _n_halvings(h, bottleneck_size, i + 1)
            down = [m for _ in range(n) for m in _down(c)]
            down += [conv3x3(c, c), nn.BatchNorm2d(c), nn.ReLU()]
            up = [m for _ in range(n) for m in _up(c)]
            up.append(conv1x1(c, c, bias=True))
            self.compressors.append(nn.Sequential(*down))
            self.restorers.append(nn.Sequential(*up))

    def compress(self, other: list[Tensor]) -> list[Tensor]:
        check_pyramid(other, self.profile.level_shapes(), "bottleneck projection input")
        return [m(f) for m, f in zip(self.compressors, other)]

    def forward(self, other: list[Tensor]) -> list[Tensor]:
        return [m(z) for m, z in zip(self.restorers, self.compress(other))]


def bottleneck_project(bp: BottleneckProjection, other: list[Tensor]) -> list[Tensor]:
    return bp(other)


class ModifiedOCBE(nn.Module):
    """One-class bottleneck embedding accepting concatenated own+projected levels.

    With ``fused=False`` it is the plain single-modality OCBE (own features only).
    """

    def __init__(self, profile: BackboneProfile, fused: bool = True):
        super().__init__()
        self.profile = profile
        self.fused = fused
        mult = 2 if fused else 1
        self.level_chains = nn.ModuleList()
        for i, c in enumerate(profile.channel_counts):
            self.level_chains.append(nn.Sequential(*[m for _ in range(3 - i) for m in _down(mult * c)]))
        cin = mult * sum(profile.channel_counts)
        cb = profile.embedding_channels
        width = max(cb // 4, 1)
        self.body = nn.Sequential(
            conv1x1(cin, width), nn.BatchNorm2d(width), nn.ReLU(),
            conv3x3(width, width), nn.BatchNorm2d(width), nn.ReLU(),
            conv1x1(width, cb), nn.BatchNorm2d(cb),
        )
        self.shortcut = nn.Sequential(conv1x1(cin, cb), nn.BatchNorm2d(cb))
        self.relu = nn.ReLU()

    def forward(self, own: list[Tensor], projected: list[Tensor] | None = None) -> Tensor:
        check_pyramid(own, self.profile.level_shapes(), "OCBE own features")
        if self.fused:
            if projected is None:
                raise DimensionError("fused OCBE needs projected features")
            check_same_shapes(own, projected, "OCBE own vs projected")
            levels = [torch.cat([a, b], dim=1) for a, b in zip(own, projected)]
        else:
            if projected is not None:
                raise DimensionError("unfused OCBE takes own features only")
            levels = list(own)
        x = torch.cat([chain(f) for chain, f in zip(self.level_chains, levels)], dim=1)
        return self.relu(self.body(x) + self.shortcut(x))


def ocbe_fuse(ocbe: ModifiedOCBE, own: list[Tensor], projected: list[Tensor] | None) -> Tensor:
    return ocbe(own, projected)
