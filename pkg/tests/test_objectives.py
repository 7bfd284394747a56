import math

import numpy as np
import pytest
import torch

from gradcheck import fd_check
from trd.exceptions import DimensionError
from trd.objectives import (BranchLosses, cosine_sim_map, level_distances, loss_CA, loss_D, loss_total,
                            pyramid_loss)


def _pyr(shapes, n=2, dtype=torch.float64, seed=0):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(n, *s, generator=g, dtype=dtype) for s in shapes]


SHAPES = [(4, 6, 6), (6, 3, 3), (8, 2, 2)]


def test_cosine_against_numpy_loop():
    a, b = _pyr([(5, 3, 4)])[0], _pyr([(5, 3, 4)], seed=1)[0]
    got = cosine_sim_map(a, b).numpy()
    A, B = a.numpy(), b.numpy()
    for n in range(2):
        for i in range(3):
            for j in range(4):
                u, v = A[n, :, i, j], B[n, :, i, j]
                ref = u @ v / (np.linalg.norm(u) * np.linalg.norm(v))
                assert got[n, 0, i, j] == pytest.approx(ref, abs=1e-12)


def test_cosine_single_and_zero_guard():
    a = torch.zeros(3, 2, 2, dtype=torch.float64)
    b = torch.randn(3, 2, 2, dtype=torch.float64)
    assert cosine_sim_map(a, b).shape == (1, 2, 2)
    assert torch.all(cosine_sim_map(a, b) == 0)
    with pytest.raises(DimensionError):
        cosine_sim_map(a, b[:2])


def test_identical_pyramids_have_zero_loss():
    p = _pyr(SHAPES)
    assert pyramid_loss(p, p).item() == pytest.approx(0.0, abs=1e-12)
    assert pyramid_loss(p, [-f for f in p]).item() == pytest.approx(6.0)


def test_pyramid_loss_is_sum_of_level_means():
    a, b = _pyr(SHAPES), _pyr(SHAPES, seed=1)
    expected = sum((1 - cosine_sim_map(x, y)).mean() for x, y in zip(a, b))
    assert pyramid_loss(a, b).item() == pytest.approx(expected.item())
    assert len(level_distances(a, b)) == 3


def test_pyramid_loss_gradient_fd():
    a = [t.requires_grad_() for t in _pyr(SHAPES)]
    b = [t.requires_grad_() for t in _pyr(SHAPES, seed=1)]
    err = fd_check(lambda ts: pyramid_loss(ts[:3], ts[3:]), a + b)
    assert err < 1e-4


def test_zero_norm_gradient_is_finite():
    a = torch.zeros(1, 3, 2, 2, dtype=torch.float64, requires_grad=True)
    b = torch.randn(1, 3, 2, 2, dtype=torch.float64, requires_grad=True)
    pyramid_loss([a], [b]).backward()
    assert torch.isfinite(a.grad).all() and torch.isfinite(b.grad).all()


def test_loss_ca_decomposes():
    e, p, c = _pyr(SHAPES), _pyr(SHAPES, seed=1), _pyr(SHAPES, seed=2)
    l_ibp, l_out, l_ca = loss_CA(e, p, c)
    assert l_ca.item() == pytest.approx(l_ibp.item() + l_out.item())
    assert l_ibp.item() == pytest.approx(loss_D(e, p).item())


def test_breakdown_totals():
    b2 = BranchLosses(1.0, 0.5, 0.25, 0.125)
    b3 = BranchLosses(2.0)
    bd = loss_total(b2, b3)
    assert b2.L_CA == 0.375
    assert bd.L_TRD == pytest.approx(1.875 + 2.0)
    assert bd.to_dict()["3d"]["L_CF"] == 0.0
    assert math.isclose(bd.to_dict()["L_TRD"], bd.L_TRD)


class _WrongSquare(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x ** 2

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return g * 3 * x


def test_fd_checker_detects_wrong_gradient():
    x = torch.randn(10, dtype=torch.float64, requires_grad=True)
    assert fd_check(lambda ts: (ts[0] ** 2).sum(), [x]) < 1e-8
    assert fd_check(lambda ts: _WrongSquare.apply(ts[0]).sum(), [x]) > 0.1
