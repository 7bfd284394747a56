"""Cosine-similarity maps and the distillation / tuner losses."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import Tensor

from .exceptions import DimensionError
from .networks import check_same_shapes

NORM_EPS = 1e-8


def cosine_sim_map(f1: Tensor, f2: Tensor) -> Tensor:
    """Cosine between channel vectors at every location.

    Accepts ``(C, h, w)`` or ``(N, C, h, w)`` and returns ``(1, h, w)`` or
    ``(N, 1, h, w)``. Locations where either vector has norm below 1e-8 give 0.
    """
    if f1.shape != f2.shape:
        raise DimensionError(f"cosine_sim_map: shape mismatch {tuple(f1.shape)} vs {tuple(f2.shape)}")
    if f1.dim() not in (3, 4):
        raise DimensionError(f"cosine_sim_map expects (C,h,w) or (N,C,h,w), got {tuple(f1.shape)}")
    ch = f1.dim() - 3
    n1 = f1.norm(dim=ch, keepdim=True)
    n2 = f2.norm(dim=ch, keepdim=True)
    valid = (n1 >= NORM_EPS) & (n2 >= NORM_EPS)
    # safe denominators keep the masked branch free of inf/nan gradients
    d1 = torch.where(valid, n1, torch.ones_like(n1))
    d2 = torch.where(valid, n2, torch.ones_like(n2))
    dot = (f1 * f2).sum(dim=ch, keepdim=True)
    return torch.where(valid, dot / (d1 * d2), torch.zeros_like(dot))


def level_distances(a: list[Tensor], b: list[Tensor]) -> list[Tensor]:
    """Per-level ``1 - cos`` maps, each ``(N, 1, h_i, w_i)``."""
    check_same_shapes(a, b, "pyramid")
    return [1 - cosine_sim_map(x, y) for x, y in zip(a, b)]


def pyramid_loss(a: list[Tensor], b: list[Tensor]) -> Tensor:
    """Sum over levels of the spatial (and batch) mean of ``1 - cos``."""
    return sum(d.mean() for d in level_distances(a, b))


def loss_D(F_E: list[Tensor], F_D: list[Tensor]) -> Tensor:
    return pyramid_loss(F_E, F_D)


def loss_CF(F_E_own: list[Tensor], F_BP_other: list[Tensor]) -> Tensor:
    return pyramid_loss(F_E_own, F_BP_other)


def loss_CA(F_E_own: list[Tensor], F_IBP_other: list[Tensor], F_CA_own: list[Tensor]) -> tuple[Tensor, Tensor, Tensor]:
    """Return ``(L_IBP, L_output, L_CA)`` with ``L_CA = L_IBP + L_output``."""
    l_ibp = pyramid_loss(F_E_own, F_IBP_other)
    l_out = pyramid_loss(F_E_own, F_CA_own)
    return l_ibp, l_out, l_ibp + l_out


@dataclass
class BranchLosses:
    L_D: float = 0.0
    L_CF: float = 0.0
    L_IBP: float = 0.0
    L_output: float = 0.0

    @property
    def L_CA(self) -> float:
        return self.L_IBP + self.L_output

    @property
    def total(self) -> float:
        return self.L_D + self.L_CF + self.L_CA

    def to_dict(self) -> dict[str, float]:
        return {**asdict(self), "L_CA": self.L_CA}


@dataclass
class LossBreakdown:
    branch_2d: BranchLosses
    branch_3d: BranchLosses

    @property
    def L_TRD(self) -> float:
        return self.branch_2d.total + self.branch_3d.total

    def to_dict(self) -> dict:
        return {"2d": self.branch_2d.to_dict(), "3d": self.branch_3d.to_dict(), "L_TRD": self.L_TRD}


def loss_total(b2d: BranchLosses, b3d: BranchLosses) -> LossBreakdown:
    return LossBreakdown(b2d, b3d)
