"""The spine: initial law, weight martingale, and path sampling.

Conditioned on dying exactly at h, the ancestral line of the last
individual alive follows the motion reweighted by

    Y_t = w(h-t, xi_t) / w(h, xi_0) * exp(-int_0^t psi'_z(xi_u, v(h-u, xi_u)) du),

started from mu reweighted by w(h, .).  For spatially constant
mechanisms Y is identically 1 and the spine is the plain motion; in the
spatial case paths are drawn by sequential importance resampling with
systematic resampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .extinction import ExtinctionProfile
from .measures import MeasureError, ParticleMeasure
from .mechanism import BranchingMechanism, psi_prime_vec
from .motion import MotionModel, step_points
from .sampler import SamplerError


@dataclass
class SpinePath:
    """Grid path on [0, h) with its cumulative log weight."""

    times: np.ndarray          # 0, dt, ..., h - dt
    locations: np.ndarray      # (n_times, d)
    log_increments: np.ndarray # per-step log Y increments, first entry 0
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.times) != len(self.locations) or len(self.times) != len(self.log_increments):
            raise MeasureError("spine path arrays disagree in length")
        if self.log_increments[0] != 0.0:
            raise MeasureError("cumulative log weight must start at 0")
        if not np.isfinite(np.cumsum(self.log_increments)).all():
            raise MeasureError("spine weight became non-finite")

    @property
    def cumulative_log_weight(self) -> np.ndarray:
        return np.cumsum(self.log_increments)

    @property
    def endpoint(self) -> np.ndarray:
        """Location at the last grid time (the h- limit surrogate)."""
        return self.locations[-1]

    def location_at(self, t: float) -> np.ndarray:
        idx = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[idx] - t) > 1e-9:
            raise MeasureError(f"time {t} is not on the spine grid")
        return self.locations[idx]


def spine_initial_measure(profile: ExtinctionProfile, mu: ParticleMeasure, h: float) -> ParticleMeasure:
    """mu reweighted by w(h, .), normalised to a probability measure."""
    if mu.is_zero:
        raise SamplerError("spine initial measure needs a nonzero mu")
    weights = mu.masses * profile.w_at(h, mu.locations)
    total = float(weights.sum())
    if total <= 0.0:
        raise SamplerError("all spine initial weights vanish: <w_h, mu> = 0")
    keep = weights > 0
    return ParticleMeasure(mu.locations[keep], weights[keep] / total)


def _log_weight_increments(profile: ExtinctionProfile, mech: BranchingMechanism,
                           times: np.ndarray, locs: np.ndarray, h: float) -> np.ndarray:
    """Per-step log Y increments along one or many paths.

    locs has shape (n_times, n_paths, d) or (n_times, d); the integral is
    the trapezoid rule on the path grid, and w is evaluated with
    log-linear extrapolation on the final segment where h - t drops
    below the profile grid.
    """
    single = locs.ndim == 2
    if single:
        locs = locs[:, None, :]
    n_t, n_p, _ = locs.shape
    logw = np.empty((n_t, n_p))
    corr = np.empty((n_t, n_p))
    for k, t in enumerate(times):
        pts = locs[k]
        logw[k] = np.log(profile.w_at(h - t, pts, extrapolate=True).clip(min=1e-300))
        corr[k] = psi_prime_vec(mech, pts, profile.v_at(h - t, pts, extrapolate=True))
    inc = np.zeros((n_t, n_p))
    dt = np.diff(times)
    inc[1:] = (logw[1:] - logw[:-1]) - 0.5 * dt[:, None] * (corr[1:] + corr[:-1])
    return inc[:, 0] if single else inc


def spine_weight(profile: ExtinctionProfile, mech: BranchingMechanism,
                 times: np.ndarray, locs: np.ndarray, h: float) -> float:
    """Y at the end of a path given on its grid (trapezoid integral)."""
    times = np.asarray(times, dtype=float)
    if times[-1] >= h:
        raise SamplerError("spine weight is only defined strictly before h")
    if h - times[-1] > profile.t_max:
        raise SamplerError("h - t exceeds the profile range")
    if profile.is_homogeneous:
        return 1.0
    inc = _log_weight_increments(profile, mech, times, np.asarray(locs, dtype=float), h)
    return float(math.exp(inc.sum()))


def _systematic_resample(weights: np.ndarray, rng) -> np.ndarray:
    n = len(weights)
    positions = (rng.random() + np.arange(n)) / n
    return np.searchsorted(np.cumsum(weights), positions).clip(max=n - 1)


def sample_spine(profile: ExtinctionProfile, mech: BranchingMechanism, motion: MotionModel,
                 nu: ParticleMeasure, h: float, grid, n_particles: int, rng,
                 ess_collapse_limit: int = 5) -> SpinePath:
    """Draw one spine path on [0, h) under the reweighted motion.

    Homogeneous profiles give the unconditioned motion (Y = 1).  Spatial
    profiles use sequential importance resampling: n_particles paths
    advance by plain motion steps, carry multiplicative Y increments,
    and are systematically resampled whenever the effective sample size
    drops below half; the returned path is drawn by the final weights.
    """
    if n_particles < 1:
        raise SamplerError("need at least one particle")
    dt = grid.dt
    n_steps = int(round(h / dt)) - 1  # grid on [0, h): 0 .. h-dt
    if n_steps < 1:
        raise SamplerError("h must exceed two grid steps")
    times = dt * np.arange(n_steps + 1)

    starts = rng.choice(nu.n_atoms, size=n_particles, p=nu.masses / nu.total_mass)
    locs = nu.locations[starts]

    if profile.is_homogeneous or n_particles == 1:
        path = np.empty((n_steps + 1, 1, locs.shape[1]))
        path[0] = locs[:1]
        cur = locs[:1]
        for k in range(n_steps):
            cur = step_points(motion, cur, dt, rng)
            path[k + 1] = cur
        path = path[:, 0, :]
        if profile.is_homogeneous:
            inc = np.zeros(n_steps + 1)
        else:
            inc = _log_weight_increments(profile, mech, times, path, h)
            inc[0] = 0.0
        return SpinePath(times=times, locations=path, log_increments=inc,
                         diagnostics={"n_particles": n_particles, "resamples": 0, "max_log_weight": float(np.max(np.cumsum(inc)))})

    history = np.empty((n_steps + 1, n_particles, locs.shape[1]))
    history[0] = locs
    log_w = np.zeros(n_particles)
    resamples = 0
    collapse_streak = 0
    max_log_weight = 0.0

    def _weight_terms(pts, t):
        lw = np.log(profile.w_at(h - t, pts, extrapolate=True).clip(min=1e-300))
        cr = psi_prime_vec(mech, pts, profile.v_at(h - t, pts, extrapolate=True))
        return lw, cr

    lw_prev, corr_prev = _weight_terms(locs, 0.0)
    cur = locs
    for k in range(n_steps):
        cur = step_points(motion, cur, dt, rng)
        history[k + 1] = cur
        t_next = times[k + 1]
        lw_next, corr_next = _weight_terms(cur, t_next)
        log_w = log_w + (lw_next - lw_prev) - 0.5 * dt * (corr_next + corr_prev)
        lw_prev, corr_prev = lw_next, corr_next
        max_log_weight = max(max_log_weight, float(log_w.max()))
        shifted = np.exp(log_w - log_w.max())
        norm = shifted / shifted.sum()
        ess = 1.0 / float((norm ** 2).sum())
        if ess < 2.0:
            collapse_streak += 1
            if collapse_streak >= ess_collapse_limit:
                raise SamplerError(
                    f"spine weights collapsed (ESS {ess:.2f} for {collapse_streak} consecutive steps)"
                )
        else:
            collapse_streak = 0
        if ess < n_particles / 2.0 and k < n_steps - 1:
            idx = _systematic_resample(norm, rng)
            history[: k + 2] = history[: k + 2, idx]
            cur = history[k + 1]
            log_w = np.zeros(n_particles)
            lw_prev, corr_prev = lw_prev[idx], corr_prev[idx]
            resamples += 1

    shifted = np.exp(log_w - log_w.max())
    pick = int(rng.choice(n_particles, p=shifted / shifted.sum()))
    path = history[:, pick, :]
    inc = _log_weight_increments(profile, mech, times, path, h)
    inc[0] = 0.0
    return SpinePath(
        times=times, locations=path, log_increments=inc,
        diagnostics={
            "n_particles": n_particles,
            "resamples": resamples,
            "max_log_weight": max_log_weight,
        },
    )
