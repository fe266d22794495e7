"""Objective functionals minimized by the propagation layers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import Graph, GraphError, check_edge_weights, edge_sq_dist, laplacian_quadratic
from .penalty import PenaltySpec, concave_conjugate, rho_eval


@dataclass(frozen=True)
class EnergyConfig:
    lam: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam}")


def _pair(g: Graph, Y, F):
    Y = np.asarray(Y, dtype=float)
    F = np.asarray(F, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if F.ndim == 1:
        F = F[:, None]
    if Y.shape != F.shape or Y.shape[0] != g.num_nodes:
        raise GraphError(f"shape mismatch: Y {Y.shape}, F {F.shape}, n={g.num_nodes}")
    return Y, F


def _lam(cfg) -> float:
    return cfg.lam if isinstance(cfg, EnergyConfig) else EnergyConfig(float(cfg)).lam


def quadratic_energy(g: Graph, Y, F, cfg) -> float:
    """||Y - F||_F^2 + lam * tr(Y^T L Y)."""
    Y, F = _pair(g, Y, F)
    return float(np.sum((Y - F) ** 2)) + _lam(cfg) * laplacian_quadratic(g, Y)


def robust_energy(g: Graph, Y, F, cfg, spec: PenaltySpec) -> float:
    """||Y - F||_F^2 + lam * sum_e rho(||y_u - y_v||^2)."""
    Y, F = _pair(g, Y, F)
    pen = float(np.sum(rho_eval(spec, edge_sq_dist(g, Y)))) if g.num_edges else 0.0
    return float(np.sum((Y - F) ** 2)) + _lam(cfg) * pen


def surrogate_energy(g: Graph, Y, F, cfg, w, spec: PenaltySpec, grid_max: float | None = None) -> float:
    """Quadratic upper bound of robust_energy for fixed edge weights ``w``.

    Includes the constant ``-sum_e conj(w_e)`` so that the bound touches the
    robust energy when ``w`` equals the attention scores at ``Y``. The
    propagation path drops this constant since it does not depend on Y.
    """
    Y, F = _pair(g, Y, F)
    w = check_edge_weights(g, w)
    zsq = edge_sq_dist(g, Y)
    if grid_max is None:
        grid_max = max(100.0, 2.0 * float(zsq.max(initial=0.0)))
    conj = concave_conjugate(spec, w, grid=(0.0, grid_max)) if g.num_edges else np.zeros(0)
    pen = float(w @ zsq - np.sum(conj))
    return float(np.sum((Y - F) ** 2)) + _lam(cfg) * pen


def quadratic_energy_grad(g: Graph, Y, F, lam: float, w=None) -> np.ndarray:
    """Gradient 2 lam L_w Y + 2 Y - 2 F."""
    Y, F = _pair(g, Y, F)
    return 2.0 * lam * (g.laplacian(w) @ Y) + 2.0 * (Y - F)
