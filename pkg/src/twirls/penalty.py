"""Robust penalties rho(z^2) and the attention scores they induce.

Every penalty is a concave, non-decreasing function of the squared edge gap
``zsq = ||y_u - y_v||^2``. Its derivative with respect to ``zsq`` is the
edge attention weight used by the reweighted propagation.

``truncated_lp`` is parameterized by the user-facing knees ``tau`` and ``T``
(in units of z); internally the knees are ``tau ** (2 - p)`` and
``T ** (2 - p)``. At exact knees the left branch is used, which is always an
element of the superdifferential.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

KINDS = ("quadratic", "log_eps", "truncated_quadratic", "truncated_lp", "abs")


class PenaltyError(ValueError):
    pass


class ConjugateUnbounded(PenaltyError):
    """The concave conjugate has no finite infimum on the search range."""


@dataclass(frozen=True)
class PenaltySpec:
    kind: str = "truncated_lp"
    p: float = 2.0
    tau: float = 1.0
    T: float = math.inf
    eps: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PenaltyError(f"unknown penalty kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "log_eps" and not self.eps > 0:
            raise PenaltyError("log_eps requires eps > 0")
        if self.kind == "truncated_lp":
            if not 0 <= self.p <= 2:
                raise PenaltyError(f"truncated_lp requires 0 <= p <= 2, got p={self.p}")
            if not self.tau > 0:
                raise PenaltyError("truncated_lp requires tau > 0")
        if self.kind in ("truncated_lp", "truncated_quadratic"):
            if self.tau < 0 or self.T < self.tau or math.isnan(self.T):
                raise PenaltyError(f"need 0 <= tau <= T, got tau={self.tau}, T={self.T}")

    @property
    def tau_bar(self) -> float:
        return self.tau ** (2 - self.p)

    @property
    def T_bar(self) -> float:
        if math.isinf(self.T):
            return math.inf
        return self.T ** (2 - self.p)

    @property
    def max_attention(self) -> float:
        """Supremum of the attention score over zsq >= 0."""
        if self.kind == "log_eps":
            return 1.0 / self.eps
        if self.kind == "truncated_lp":
            return self.tau_bar ** (self.p - 2)
        if self.kind == "abs":
            return math.inf
        return 1.0

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "truncated_lp":
            d.update(p=self.p, tau=self.tau, T="inf" if math.isinf(self.T) else self.T)
        elif self.kind == "truncated_quadratic":
            d.update(tau=self.tau)
        elif self.kind == "log_eps":
            d.update(eps=self.eps)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PenaltySpec":
        d = dict(d)
        allowed = {"kind", "p", "tau", "T", "eps"}
        extra = set(d) - allowed
        if extra:
            raise PenaltyError(f"unknown penalty keys {sorted(extra)}")
        if "T" in d:
            d["T"] = parse_float(d["T"])
        for k in ("p", "tau", "eps"):
            if k in d:
                d[k] = float(d[k])
        return cls(**d)


def parse_float(x) -> float:
    if isinstance(x, str):
        if x.strip().lower() in ("inf", "+inf", "infinity"):
            return math.inf
        return float(x)
    return float(x)


def _prep(zsq):
    zsq = np.asarray(zsq, dtype=float)
    if np.any(zsq < 0) or np.any(np.isnan(zsq)):
        raise PenaltyError("squared gaps must be nonnegative")
    return np.atleast_1d(zsq), zsq.ndim == 0


def _out(out, scalar):
    return float(out[0]) if scalar else out


def rho_eval(spec: PenaltySpec, zsq):
    """Penalty value; vectorized over ``zsq``."""
    zsq, scalar = _prep(zsq)
    kind = spec.kind
    if kind == "quadratic":
        out = zsq.copy()
    elif kind == "log_eps":
        out = np.log(zsq + spec.eps)
    elif kind == "abs":
        out = np.sqrt(zsq)
    elif kind == "truncated_quadratic":
        out = np.minimum(zsq, spec.tau**2)
    else:
        out = _truncated_lp_rho(spec, zsq)
    return _out(out, scalar)


def _lp_middle(p: float, tb: float, zsq):
    # 2/p z^p - rho0 = 2/p (z^p - tb^p) + tb^p. Written as 2x * expm1(px)/(px)
    # so tiny p (and the p -> 0 limit 2 log(z / tb) + 1) neither cancels nor
    # overflows through 2/p
    with np.errstate(divide="ignore"):
        x = np.asarray(0.5 * np.log(zsq) - math.log(tb), dtype=float)
    y = p * x
    ratio = np.ones_like(y)
    nz = y != 0
    ratio[nz] = np.expm1(y[nz]) / y[nz]
    return tb**p * (2.0 * x * ratio + 1.0)


def _truncated_lp_rho(spec, zsq):
    p, tb, Tb = spec.p, spec.tau_bar, spec.T_bar
    z = np.sqrt(zsq)
    low = z <= tb
    high = z > Tb
    mid = ~(low | high)
    out = np.empty_like(zsq)
    out[low] = tb ** (p - 2) * zsq[low]
    out[mid] = _lp_middle(p, tb, zsq[mid])
    if np.any(high):
        out[high] = _lp_middle(p, tb, np.array(Tb**2))
    return out


def attention_score(spec: PenaltySpec, zsq):
    """d rho / d zsq, left branch at knees. ``abs`` gives +inf at zsq = 0."""
    zsq, scalar = _prep(zsq)
    kind = spec.kind
    if kind == "quadratic":
        out = np.ones_like(zsq)
    elif kind == "log_eps":
        out = 1.0 / (zsq + spec.eps)
    elif kind == "abs":
        with np.errstate(divide="ignore"):
            out = 0.5 / np.sqrt(zsq)
    elif kind == "truncated_quadratic":
        out = np.where(np.sqrt(zsq) <= spec.tau, 1.0, 0.0)
    else:
        p, tb, Tb = spec.p, spec.tau_bar, spec.T_bar
        z = np.sqrt(zsq)
        out = np.where(z <= tb, tb ** (p - 2), 0.0)
        mid = (z > tb) & (z <= Tb)
        out[mid] = np.power(zsq[mid], (p - 2) / 2)
    return _out(out, scalar)


def attention_score_grad(spec: PenaltySpec, zsq):
    """Derivative of the attention score with respect to zsq (0 on flat pieces)."""
    zsq, scalar = _prep(zsq)
    kind = spec.kind
    out = np.zeros_like(zsq)
    if kind == "log_eps":
        out = -1.0 / (zsq + spec.eps) ** 2
    elif kind == "abs":
        with np.errstate(divide="ignore"):
            out = -0.25 * np.power(zsq, -1.5)
    elif kind == "truncated_lp":
        p, tb, Tb = spec.p, spec.tau_bar, spec.T_bar
        z = np.sqrt(zsq)
        mid = (z > tb) & (z <= Tb)
        out[mid] = 0.5 * (p - 2) * np.power(zsq[mid], (p - 4) / 2)
    return _out(out, scalar)


@lru_cache(maxsize=16)
def _grid(spec: PenaltySpec, lo: float, hi: float, num: int):
    u = np.linspace(lo, hi, num)
    return u, np.asarray(rho_eval(spec, u))


def concave_conjugate(spec: PenaltySpec, gamma, grid=(0.0, 100.0), num: int = 100_000, refine: int = 60):
    """inf over zsq in ``grid`` of ``gamma * zsq - rho(zsq)``.

    Dense grid search followed by golden-section refinement inside the
    bracketing grid cells; the objective is convex in zsq, so the bracket
    holds the minimizer. Raises ConjugateUnbounded when the objective is
    still decreasing at the right end of the range.
    """
    lo, hi = float(grid[0]), float(grid[1])
    gam = np.asarray(gamma, dtype=float)
    scalar = gam.ndim == 0
    gam = np.atleast_1d(gam).ravel()
    if np.any(gam < 0) or not np.all(np.isfinite(gam)):
        raise PenaltyError("conjugate argument must be finite and nonnegative")
    num = int(num)
    u, ru = _grid(spec, lo, hi, num)
    h = u[1] - u[0]
    idx = np.empty(gam.shape[0], dtype=np.int64)
    best = np.empty(gam.shape[0])
    chunk = max(1, 4_000_000 // num)
    for s0 in range(0, gam.shape[0], chunk):
        g = gam[s0:s0 + chunk, None]
        vals = g * u[None, :] - ru[None, :]
        i = np.argmin(vals, axis=1)
        idx[s0:s0 + chunk] = i
        best[s0:s0 + chunk] = vals[np.arange(len(i)), i]
    at_end = idx == num - 1
    if np.any(at_end):
        slope = gam[at_end] - np.asarray(attention_score(spec, np.full(at_end.sum(), hi)))
        if np.any(slope < 0):
            g = gam[at_end][np.argmin(slope)]
            raise ConjugateUnbounded(
                f"gamma={g:.6g}: objective still decreasing at zsq={hi:g}; "
                "gamma is below the attention range on this grid"
            )
    a = np.maximum(lo, u[idx] - h)
    b = np.minimum(hi, u[idx] + h)
    refined = _golden_min(lambda t: gam * t - rho_eval(spec, t), a, b, refine)
    out = np.minimum(best, refined)
    return float(out[0]) if scalar else out


def _golden_min(f, a, b, iters: int):
    """Vectorized golden-section search of a convex f over [a, b]."""
    r = (math.sqrt(5) - 1) / 2
    a, b = a.copy(), b.copy()
    c, d = b - r * (b - a), a + r * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        left = fc < fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        c_new = b - r * (b - a)
        d_new = a + r * (b - a)
        c, d = np.where(left, c_new, d), np.where(left, c, d_new)
        f_new = f(np.where(left, c, d))
        fc, fd = np.where(left, f_new, fd), np.where(left, fc, f_new)
    return np.minimum.reduce([fc, fd, f(a), f(b)])
