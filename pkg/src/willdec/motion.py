"""Spatial motions: step samplers and semigroup evaluation.

Supported kinds: free Brownian motion, Euler drift-diffusion, Brownian
motion killed at the boundary of a box, and subordinate Brownian motion
(Brownian motion time-changed by a stable subordinator, i.e. a symmetric
stable process).  The cemetery state is encoded as an all-NaN point; it
is absorbing and every field evaluates to 0 there.

The stable-(1/2) subordinator increment over dt is dt^2 / N^2 with N a
standard normal, which makes the d=1 subordinate motion the standard
Cauchy process (increment scale dt per unit time).  General indices q in
(0, 1) use the exact Kanter representation; both normalisations satisfy
E exp(-lam S_t) = exp(-t (2 lam)^q), so the subordinate motion is the
standard symmetric (2q)-stable process with E exp(i u B_{S_t}) =
exp(-t |u|^(2q)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .fields import ScalarField


class MotionError(ValueError):
    pass


def cemetery(d: int) -> np.ndarray:
    return np.full(d, np.nan)


def is_dead(pts: np.ndarray) -> np.ndarray:
    return np.isnan(np.atleast_2d(pts)).any(axis=1)


@dataclass(frozen=True)
class MotionModel:
    kind: str  # brownian | drift_diffusion | killed_box | subordinate_bm
    d: int = 1
    sigma: float = 1.0
    drift: Optional[ScalarField] = None
    box_lo: float = -np.inf
    box_hi: float = np.inf
    subordinator_index: float = 0.5
    step_dt: float = 0.01  # sub-step for kinds without exact increments

    def __post_init__(self):
        if self.kind not in ("brownian", "drift_diffusion", "killed_box", "subordinate_bm"):
            raise MotionError(f"unknown motion kind {self.kind!r}")
        if not 1 <= self.d <= 3:
            raise MotionError(f"dimension must be 1..3, got {self.d}")
        if self.kind == "drift_diffusion" and self.drift is None:
            raise MotionError("drift_diffusion requires a drift field")
        if self.kind == "killed_box" and not self.box_lo < self.box_hi:
            raise MotionError("killed_box requires box_lo < box_hi")
        if self.kind == "subordinate_bm" and not 0.0 < self.subordinator_index < 1.0:
            raise MotionError("subordinator index must lie in (0, 1)")

    @property
    def conservative(self) -> bool:
        return self.kind != "killed_box"

    @property
    def exact_increments(self) -> bool:
        return self.kind in ("brownian", "subordinate_bm")


def _kanter_positive_stable(q: float, n: int, rng) -> np.ndarray:
    """Exact one-sided q-stable draws with E exp(-lam A) = exp(-lam^q)."""
    u = rng.uniform(0.0, math.pi, size=n)
    w = rng.exponential(1.0, size=n)
    a_u = (np.sin(q * u) ** (q / (1.0 - q))) * np.sin((1.0 - q) * u) / (np.sin(u) ** (1.0 / (1.0 - q)))
    return (a_u / w) ** ((1.0 - q) / q)


def subordinator_increment(q: float, dt: float, n: int, rng) -> np.ndarray:
    """Stable subordinator increments with E exp(-lam S) = exp(-dt (2 lam)^q)."""
    if q == 0.5:
        nrm = rng.standard_normal(n)
        nrm = np.where(nrm == 0.0, 1e-300, nrm)
        return dt * dt / (nrm * nrm)
    return 2.0 * dt ** (1.0 / q) * _kanter_positive_stable(q, n, rng)


def step_points(motion: MotionModel, pts: np.ndarray, dt: float, rng) -> np.ndarray:
    """One increment for an (n, d) block of points; NaN rows stay dead."""
    if dt <= 0:
        raise MotionError(f"dt must be positive, got {dt}")
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    n, d = pts.shape
    dead = is_dead(pts)
    out = pts.copy()
    live = ~dead
    if not live.any():
        return out
    x = pts[live]
    if motion.kind == "brownian":
        x = x + motion.sigma * math.sqrt(dt) * rng.standard_normal(x.shape)
    elif motion.kind == "drift_diffusion":
        x = x + motion.drift(x)[:, None] * dt + motion.sigma * math.sqrt(dt) * rng.standard_normal(x.shape)
    elif motion.kind == "subordinate_bm":
        s = subordinator_increment(motion.subordinator_index, dt, x.shape[0], rng)
        x = x + np.sqrt(s)[:, None] * rng.standard_normal(x.shape)
    else:  # killed_box: endpoint check only (O(sqrt(dt)) kill bias)
        x = x + motion.sigma * math.sqrt(dt) * rng.standard_normal(x.shape)
        escaped = (x < motion.box_lo).any(axis=1) | (x > motion.box_hi).any(axis=1)
        x[escaped] = np.nan
    out[live] = x
    return out


def sample_step(motion: MotionModel, x, dt: float, rng) -> np.ndarray:
    """One increment from a single point (or the cemetery, which absorbs)."""
    return step_points(motion, np.atleast_2d(x), dt, rng)[0]


def run_paths(motion: MotionModel, x0: np.ndarray, dt: float, n_steps: int, rng,
              n_paths: Optional[int] = None) -> np.ndarray:
    """Simulate paths on the dt-grid; returns (n_steps+1, n_paths, d)."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    if n_paths is not None and x0.shape[0] == 1:
        x0 = np.repeat(x0, n_paths, axis=0)
    out = np.empty((n_steps + 1,) + x0.shape)
    out[0] = x0
    cur = x0
    for k in range(n_steps):
        cur = step_points(motion, cur, dt, rng)
        out[k + 1] = cur
    return out


def _gauss_affine_exact(motion: MotionModel, f: ScalarField, t: float, x: np.ndarray):
    """Closed-form P_t f for Brownian motion and f = a + b exp(-|x|^2)."""
    coeffs = f.gauss_affine()
    if motion.kind != "brownian" or coeffs is None:
        return None
    a, b = coeffs
    s = 1.0 + 2.0 * motion.sigma ** 2 * t
    val = a + b * s ** (-motion.d / 2.0) * math.exp(-float(np.sum(x * x)) / s)
    return val


def semigroup_apply(motion: MotionModel, f: ScalarField, t: float, x, n_mc: int, rng,
                    exact: bool = True):
    """Estimate P_t f(x); returns (value, standard_error).

    Uses the closed-form Gaussian path when the motion is Brownian and f
    is an affine combination of 1 and exp(-|x|^2); otherwise Monte Carlo
    over n_mc paths (single exact increment where available, sub-stepped
    at motion.step_dt otherwise).  Unbounded f is rejected.
    """
    lo, hi = f.bounds()
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise MotionError(f"semigroup_apply requires a bounded field, got bounds ({lo}, {hi})")
    if t <= 0:
        raise MotionError("semigroup_apply requires t > 0")
    x = np.asarray(x, dtype=float).reshape(-1)
    if exact:
        val = _gauss_affine_exact(motion, f, t, x)
        if val is not None:
            return val, 0.0
    if n_mc < 1:
        raise MotionError("n_mc must be >= 1")
    pts = np.repeat(x[None, :], n_mc, axis=0)
    if motion.exact_increments:
        pts = step_points(motion, pts, t, rng)
    else:
        n_steps = max(1, int(round(t / motion.step_dt)))
        sub = t / n_steps
        for _ in range(n_steps):
            pts = step_points(motion, pts, sub, rng)
    vals = f(pts)
    mean = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(n_mc)) if n_mc > 1 else float("inf")
    return mean, se
