"""Crossmodal amplifier: channel-expanding projection and softmax-weighted fusion."""
from __future__ import annotations

import torch
from torch import Tensor, nn

from .networks import BackboneProfile, check_pyramid, check_same_shapes, conv1x1, conv3x3


class InvertedBottleneckProjection(nn.Module):
    """Per level: 1x1 expand -> 3x3 -> 1x1 compress, spatial size untouched."""

    def __init__(self, profile: BackboneProfile, expansion: int = 2):
        super().__init__()
        self.profile = profile
        self.expansion = expansion
        self.levels = nn.ModuleList()
        for c in profile.channel_counts:
            w = expansion * c
            self.levels.append(nn.Sequential(
                conv1x1(c, w, bias=True), nn.ReLU(),
                conv3x3(w, w, bias=True), nn.ReLU(),
                conv1x1(w, c, bias=True),
            ))

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        return tuple(level[0].out_channels for level in self.levels)

    def forward(self, other: list[Tensor]) -> list[Tensor]:
        check_pyramid(other, self.profile.level_shapes(), "inverted bottleneck input")
        return [m(f) for m, f in zip(self.levels, other)]


def ibp_project(ibp: InvertedBottleneckProjection, other: list[Tensor]) -> list[Tensor]:
    return ibp(other)


class FusionWeights(nn.Module):
    """Per-level logits ``w1`` (decoder) and ``w2`` (projection), initialized to 1."""

    def __init__(self, levels: int = 3):
        super().__init__()
        self.w1 = nn.Parameter(torch.ones(levels))
        self.w2 = nn.Parameter(torch.ones(levels))


def amplify(f_d: list[Tensor], f_ibp: list[Tensor], w: FusionWeights) -> list[Tensor]:
    """Convex combination ``softmax(w1, w2)`` of decoder and projected features per level."""
    check_same_shapes(f_d, f_ibp, "amplify inputs")
    weights = torch.softmax(torch.stack([w.w1, w.w2]), dim=0)
    return [weights[0, i] * d + weights[1, i] * p for i, (d, p) in enumerate(zip(f_d, f_ibp))]
