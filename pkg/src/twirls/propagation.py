"""Unfolded propagation: preconditioned gradient steps, proximal ReLU and
IRLS attention, plus the closed-form and SGC references they are compared to.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.spatial.distance import pdist

from .energy import quadratic_energy, robust_energy
from .graph import Graph, GraphError, check_edge_weights, edge_sq_dist, sym_norm_apply
from .penalty import PenaltySpec, attention_score

logger = logging.getLogger(__name__)

MODES = ("jacobi", "normalized")
PROX = ("none", "relu")
SCHEDULES = ("mid_once", "pre_and_mid", "every_step")
DENSE_LIMIT = 4096


class PropagationError(ValueError):
    pass


class SpectralNormError(RuntimeError):
    def __init__(self, msg, estimate):
        super().__init__(msg)
        self.estimate = estimate


@dataclass(frozen=True)
class PropagationConfig:
    steps: int = 16
    alpha: float = 1.0
    lam: float = 1.0
    mode: str = "jacobi"
    prox: str = "none"
    attention: PenaltySpec | None = None
    attention_schedule: str = "mid_once"
    record_trace: bool = False
    tol: float | None = None  # early stop on relative change; oracle comparisons only

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 0:
            raise PropagationError(f"steps must be a nonnegative integer, got {self.steps}")
        if not self.alpha > 0:
            raise PropagationError(f"alpha must be > 0, got {self.alpha}")
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise PropagationError(f"lambda must be finite and >= 0, got {self.lam}")
        if self.mode not in MODES:
            raise PropagationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.prox not in PROX:
            raise PropagationError(f"prox must be one of {PROX}, got {self.prox!r}")
        if self.attention_schedule not in SCHEDULES:
            raise PropagationError(f"attention_schedule must be one of {SCHEDULES}")
        if self.attention is not None and self.mode == "normalized":
            raise PropagationError("attention is only defined for the jacobi propagation mode")

    def attention_positions(self) -> set[int]:
        """Step indices before which edge weights are recomputed."""
        if self.attention is None or self.steps == 0:
            return set()
        if self.attention_schedule == "every_step":
            return set(range(self.steps))
        mid = {self.steps // 2}
        if self.attention_schedule == "pre_and_mid":
            return mid | {0}
        return mid


@dataclass
class PropagationTrace:
    final: np.ndarray
    energies: list[float] = field(default_factory=list)
    gammas: list[np.ndarray] = field(default_factory=list)
    steps_run: int = 0


def _as2d(Y):
    Y = np.asarray(Y, dtype=float)
    return Y[:, None] if Y.ndim == 1 else Y


def _same_shape(g: Graph, *mats):
    mats = [_as2d(M) for M in mats]
    for M in mats:
        if M.shape != mats[0].shape or M.shape[0] != g.num_nodes:
            raise GraphError(f"shape mismatch: {[M.shape for M in mats]}, n={g.num_nodes}")
    return mats


def closed_form_solve(g: Graph, F, lam: float, w=None) -> np.ndarray:
    """Dense solve of (I + lam L_w) Y = F."""
    (F,) = _same_shape(g, F)
    n = g.num_nodes
    if n > DENSE_LIMIT:
        raise PropagationError(f"closed form limited to n <= {DENSE_LIMIT}, got n={n}")
    Q = np.eye(n) + lam * g.laplacian(w).toarray()
    return scipy.linalg.solve(Q, F, assume_a="pos")


def jacobi_step(g: Graph, Y, F, alpha: float, lam: float, w=None) -> np.ndarray:
    """(1 - alpha) Y + alpha Dt^{-1} (lam A_w Y + F), Dt = lam D_w + I."""
    Y, F = _same_shape(g, Y, F)
    dt = lam * g.weighted_degree(w) + 1.0
    AY = g.adjacency(w) @ Y
    return (1.0 - alpha) * Y + alpha * (lam * AY + F) / dt[:, None]


def prox_relu(Y) -> np.ndarray:
    return np.maximum(np.asarray(Y, dtype=float), 0.0)


def normalized_step(g: Graph, Y, Y0, alpha: float, lam: float) -> np.ndarray:
    """Step on the symmetrically normalized Laplacian energy; Y0 is the skip term."""
    Y, Y0 = _same_shape(g, Y, Y0)
    return (1.0 - alpha - alpha * lam) * Y + alpha * lam * sym_norm_apply(g, Y) + alpha * Y0


def sgc_step(g: Graph, Z) -> np.ndarray:
    return sym_norm_apply(g, Z)


def normalized_energy(g: Graph, Y, F, lam: float) -> float:
    """||Y - F||^2 + lam tr(Y^T (I - Dt^{-1/2} At Dt^{-1/2}) Y)."""
    Y, F = _same_shape(g, Y, F)
    return float(np.sum((Y - F) ** 2) + lam * np.sum(Y * (Y - sym_norm_apply(g, Y))))


def spectral_norm(M, n: int, tol: float = 1e-9, max_iter: int = 10_000, seed: int = 0) -> float:
    """Largest eigenvalue of a symmetric PSD operator by power iteration."""
    x = np.random.default_rng(seed).standard_normal(n)
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(max_iter):
        y = M @ x
        new = float(np.linalg.norm(y))
        if new == 0.0:
            return 0.0
        x = y / new
        if abs(new - est) <= tol * new:
            return new
        est = new
    raise SpectralNormError(f"power iteration did not converge in {max_iter} iterations", est)


def max_step_size(g: Graph, w, lam: float) -> float:
    """Descent-guaranteeing step bound 1 / (2 ||B^T diag(w) B + lam I||_2)."""
    n = g.num_nodes
    w = check_edge_weights(g, w) if w is not None else None
    M = g.laplacian(w)
    if n <= 64:
        top = float(np.linalg.eigvalsh(M.toarray())[-1]) if n else 0.0
        norm = top + lam
    else:
        norm = spectral_norm(M + lam * sp.identity(n, format="csr"), n)
    if norm == 0.0:
        return float("inf")
    return 0.5 / norm


def zspace_reparam(g: Graph, Y, lam: float, inverse: bool = False) -> np.ndarray:
    """Z = Dt^{1/2} Y (or its inverse), Dt = lam D + I."""
    (Y,) = _same_shape(g, Y)
    s = np.sqrt(lam * g.degree + 1.0)
    return Y / s[:, None] if inverse else Y * s[:, None]


def row_dispersion(Y) -> float:
    """Mean pairwise Euclidean distance between embedding rows."""
    Y = _as2d(Y)
    if Y.shape[0] < 2:
        return 0.0
    return float(pdist(Y).mean())


def mean_pairwise_cosine(Y) -> float:
    Y = _as2d(Y)
    if Y.shape[0] < 2:
        return 1.0
    return float(1.0 - pdist(Y, "cosine").mean())


def _energy(g, Y, F, cfg: PropagationConfig) -> float:
    if cfg.mode == "normalized":
        return normalized_energy(g, Y, F, cfg.lam)
    if cfg.attention is not None:
        return robust_energy(g, Y, F, cfg.lam, cfg.attention)
    return quadratic_energy(g, Y, F, cfg.lam)


def edge_attention(g: Graph, Y, spec: PenaltySpec) -> np.ndarray:
    return np.asarray(attention_score(spec, edge_sq_dist(g, Y)), dtype=float)


def unfold(g: Graph, F, cfg: PropagationConfig) -> PropagationTrace:
    """Run ``cfg.steps`` propagation steps from Y = F."""
    (F,) = _same_shape(g, F)
    Y = F.copy()
    w = None
    positions = cfg.attention_positions()
    trace = PropagationTrace(final=Y)
    if cfg.record_trace:
        trace.energies.append(_energy(g, Y, F, cfg))
    for k in range(cfg.steps):
        if k in positions:
            w = edge_attention(g, Y, cfg.attention)
            trace.gammas.append(w)
        if cfg.mode == "jacobi":
            Y_new = jacobi_step(g, Y, F, cfg.alpha, cfg.lam, w)
        else:
            Y_new = normalized_step(g, Y, F, cfg.alpha, cfg.lam)
        if cfg.prox == "relu":
            Y_new = prox_relu(Y_new)
        if not np.all(np.isfinite(Y_new)):
            raise PropagationError(f"non-finite embeddings after step {k}")
        change = np.linalg.norm(Y_new - Y) / max(np.linalg.norm(Y_new), 1e-300)
        Y = Y_new
        trace.steps_run = k + 1
        if cfg.record_trace:
            trace.energies.append(_energy(g, Y, F, cfg))
        if cfg.tol is not None and change < cfg.tol:
            logger.debug("unfold stopped early after %d steps", k + 1)
            break
    trace.final = Y
    return trace
