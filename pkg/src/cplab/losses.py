"""Contrastive PSD losses.

Every function takes PSD sets as (N, bins) tensors.  Distances are plain sums
of squared bin differences.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConsistencyError, InvalidConfigError, ShapeError


@dataclass
class LossBreakdown:
    l_p_rr: torch.Tensor
    l_n_rr: torch.Tensor
    l_p_gr: torch.Tensor
    l_n_gr: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        names = ("l_p_rr", "l_n_rr", "l_p_gr", "l_n_gr", "total")
        return {k: float(getattr(self, k).detach()) for k in names}


def _pair_sq_dists(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """(N, M) matrix of squared Euclidean distances between rows."""
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(dim=-1)


def _check(*sets: torch.Tensor | None) -> None:
    shapes = {tuple(s.shape) for s in sets if s is not None}
    if len(shapes) != 1:
        raise ShapeError(f"PSD sets must share one (N, bins) shape, got {sorted(shapes)}")
    if len(next(iter(shapes))) != 2:
        raise ShapeError("PSD sets must be 2-D (N, bins)")


def _check_phi(g: torch.Tensor | None, phi: int, name: str) -> None:
    if phi not in (0, 1):
        raise ConsistencyError(f"{name} must be 0 or 1, got {phi}")
    if (g is not None) != (phi == 1):
        raise ConsistencyError(f"GT PSDs for {name}={phi} must be {'present' if phi else 'absent'}")


def loss_rr_pos(f: torch.Tensor, f2: torch.Tensor) -> torch.Tensor:
    """Pull together PSDs drawn from the same block (i != j pairs, both videos)."""
    _check(f, f2)
    n = f.shape[0]
    if n < 2:
        raise InvalidConfigError("need at least 2 samples per video")
    # diagonal terms are exactly zero, so summing the full matrix is the i != j sum
    total = _pair_sq_dists(f, f).sum() + _pair_sq_dists(f2, f2).sum()
    return total / (2 * n * (n - 1))


def loss_rr_neg(f: torch.Tensor, f2: torch.Tensor) -> torch.Tensor:
    _check(f, f2)
    n = f.shape[0]
    return -_pair_sq_dists(f, f2).sum() / (n * n)


def loss_gr_pos(f, g, f2, g2, phi: int, phi2: int) -> torch.Tensor:
    """Pull rPPG PSDs towards their own video's GT PSDs; 0 when neither video is labelled."""
    _check_phi(g, phi, "phi")
    _check_phi(g2, phi2, "phi2")
    _check(f, f2, g, g2)
    if phi + phi2 == 0:
        return torch.zeros((), dtype=f.dtype, device=f.device)
    n = f.shape[0]
    total = torch.zeros((), dtype=f.dtype, device=f.device)
    if phi:
        total = total + _pair_sq_dists(f, g).sum()
    if phi2:
        total = total + _pair_sq_dists(f2, g2).sum()
    return total / ((phi + phi2) * n * n)


def loss_gr_neg(f, g, f2, g2, phi: int, phi2: int) -> torch.Tensor:
    """Push rPPG PSDs away from the other video's GT PSDs (f2 vs g, f vs g2)."""
    _check_phi(g, phi, "phi")
    _check_phi(g2, phi2, "phi2")
    _check(f, f2, g, g2)
    if phi + phi2 == 0:
        return torch.zeros((), dtype=f.dtype, device=f.device)
    n = f.shape[0]
    total = torch.zeros((), dtype=f.dtype, device=f.device)
    if phi:
        total = total + _pair_sq_dists(f2, g).sum()
    if phi2:
        total = total + _pair_sq_dists(f, g2).sum()
    return -total / ((phi + phi2) * n * n)


def loss_total(f, f2, g, g2, phi: int, phi2: int, *, use_rr_neg: bool = True,
               use_gr_pos: bool = True, use_gr_neg: bool = True) -> LossBreakdown:
    """All four terms and their sum.  Disabled terms are reported as exact zeros."""
    zero = torch.zeros((), dtype=f.dtype, device=f.device)
    l_p_rr = loss_rr_pos(f, f2)
    l_n_rr = loss_rr_neg(f, f2) if use_rr_neg else zero
    l_p_gr = loss_gr_pos(f, g, f2, g2, phi, phi2) if use_gr_pos else zero
    l_n_gr = loss_gr_neg(f, g, f2, g2, phi, phi2) if use_gr_neg else zero
    total = l_p_rr + l_n_rr + l_p_gr + l_n_gr
    return LossBreakdown(l_p_rr, l_n_rr, l_p_gr, l_n_gr, total)
