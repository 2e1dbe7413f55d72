"""Decomposition sampler: spine + continuous/jump/time-zero immigration.

Conditioned on dying exactly at h, the process equals (in law) the sum of
an initial-mass part conditioned to die before h and two Poisson streams
of clones born along the spine: a continuous stream with rate 2 b(xi_s)
from the excursion law, and a jump stream from the Levy kernel with
initial masses y.  Both raw intensities have infinite total mass, so the
sampler keeps only clones living at least delta; excursion-law clones
are realised as small-initial-mass clones (mass eps_n) conditioned on
that window.  Clone trajectories are anchored at the next grid time
after their birth so the assembled measure is an exact atom union on
grid times.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .extinction import ExtinctionProfile
from .measures import ParticleMeasure, TrajectoryRecord
from .mechanism import BranchingMechanism
from .motion import MotionModel
from .sampler import InfeasibleError, ParticleControls, SamplerError, sample_superprocess
from .spine import SpinePath, sample_spine, spine_initial_measure


@dataclass
class ImmigrationEvent:
    kind: str              # continuous | jump
    s: float               # birth time in [0, h)
    anchor: float          # grid time >= s where the clone is realised
    location: np.ndarray
    mass: float            # eps_n (continuous) or the jump mass y
    clone: TrajectoryRecord


@dataclass
class WilliamsSample:
    spine: SpinePath
    initial: TrajectoryRecord
    events: List[ImmigrationEvent]
    assembled: TrajectoryRecord
    h: float
    delta: float
    eps_n: Optional[float]


def _spine_location(spine: SpinePath, s: float, dt: float) -> np.ndarray:
    idx = min(int(s / dt), len(spine.times) - 1)
    return spine.locations[idx]


def default_eps_n(profile: ExtinctionProfile, delta: float, x) -> float:
    """Small-mass scale for excursion clones: 0.05 / v(delta, x)."""
    return float(0.05 / profile.v_at(delta, np.atleast_2d(x))[0])


def _clone_conditioned(mech, motion, x, mass, window_lo: float, window_hi: float,
                       grid, ctrl, rng, max_attempts: int):
    """Clone from mass*delta_x conditioned on grid death in [window_lo, window_hi)."""
    dt = grid.dt
    n_steps = int(round(window_hi / dt)) - 1  # death strictly before window_hi
    mu = ParticleMeasure.delta(x, mass)
    for attempt in range(1, max_attempts + 1):
        rec = sample_superprocess(mech, motion, mu, grid, ctrl, rng, n_steps=n_steps)
        if math.isfinite(rec.extinction_time) and rec.extinction_time >= window_lo - 1e-12:
            return rec, attempt
    raise InfeasibleError(
        f"clone rejection exhausted {max_attempts} attempts "
        f"(window [{window_lo:.3g}, {window_hi:.3g}), mass {mass:.3g})",
        acceptance_rate=1.0 / max_attempts,
    )


def sample_continuous_immigration(spine: SpinePath, profile: ExtinctionProfile,
                                  mech: BranchingMechanism, motion: MotionModel,
                                  h: float, delta: float, eps_n: Optional[float],
                                  grid, ctrl: ParticleControls, rng,
                                  max_attempts: int = 200_000) -> List[ImmigrationEvent]:
    """Excursion-law immigration along the spine, thinned and truncated.

    The stream has rate 2 b(xi_s) (v(delta, xi_s) - v(h - g(s), xi_s))
    with g(s) the grid time the clone is anchored at, which is exactly
    the mass of the excursion law restricted to clones with lifetime in
    [delta, h - g(s)).  Each event's clone is drawn from a small initial
    mass eps_n conditioned on that lifetime window (the small-mass limit
    realisation of the normalised excursion law).
    """
    dt = grid.dt
    b_on_spine = mech.b(spine.locations)
    if float(b_on_spine.max()) == 0.0:
        return []
    v_delta = profile.v_at(delta, spine.locations, extrapolate=True)
    horizon = h - delta
    events: List[ImmigrationEvent] = []
    for _ in range(10):  # envelope rebuild guard
        envelope = 2.0 * float(b_on_spine.max()) * float(v_delta.max()) * (1.0 + 1e-9)
        n_cand = rng.poisson(envelope * horizon)
        cands = np.sort(rng.uniform(0.0, horizon, size=n_cand))
        restart = False
        events = []
        for s in cands:
            idx = min(int(s / dt), len(spine.times) - 1)
            g = dt * math.ceil(s / dt - 1e-12)
            g = max(g, dt)
            if h - g <= delta + 1e-12:
                continue
            x = spine.locations[idx]
            v_hg = float(profile.v_at(h - g, x[None, :])[0])
            rate = 2.0 * float(b_on_spine[idx]) * max(float(v_delta[idx]) - v_hg, 0.0)
            if rate > envelope:
                restart = True
                break
            if rng.random() * envelope >= rate:
                continue
            eps_here = eps_n if eps_n is not None else default_eps_n(profile, delta, x)
            clone, _ = _clone_conditioned(
                mech, motion, x, eps_here, delta, h - g, grid, ctrl, rng, max_attempts
            )
            events.append(ImmigrationEvent(
                kind="continuous", s=float(s), anchor=float(g), location=x.copy(),
                mass=eps_here, clone=clone,
            ))
        if not restart:
            return events
        b_on_spine = b_on_spine * 1.5  # inflate the envelope and resample the stream
    raise SamplerError("continuous-immigration envelope kept being violated")


def sample_jump_immigration(spine: SpinePath, profile: ExtinctionProfile,
                            mech: BranchingMechanism, motion: MotionModel,
                            h: float, delta: float, grid, ctrl: ParticleControls, rng,
                            max_attempts: int = 200_000) -> List[ImmigrationEvent]:
    """Levy-kernel immigration along the spine, truncated to the window.

    Rate integral y (exp(-y v(h - g(s), xi_s)) - exp(-y v(delta, xi_s)))
    n(xi_s, dy); per event the mass is drawn from that integrand and the
    clone from mass y delta_x conditioned on dying in [delta, h - g(s)).
    """
    if mech.kernel is None:
        return []
    dt = grid.dt
    v_delta = profile.v_at(delta, spine.locations, extrapolate=True)
    horizon = h - delta
    # envelope: the window rate is largest when the upper window end is
    # widest, i.e. za = v at the full remaining horizon
    za_min = profile.v_at(h - dt, spine.locations, extrapolate=True) * 0.0  # za -> 0 bound
    rate_bound = mech.kernel.window_rate(za_min, v_delta, spine.locations)
    events: List[ImmigrationEvent] = []
    envelope = float(rate_bound.max()) * (1.0 + 1e-9)
    if envelope <= 0.0:
        return []
    n_cand = rng.poisson(envelope * horizon)
    cands = np.sort(rng.uniform(0.0, horizon, size=n_cand))
    for s in cands:
        idx = min(int(s / dt), len(spine.times) - 1)
        g = dt * math.ceil(s / dt - 1e-12)
        g = max(g, dt)
        if h - g <= delta + 1e-12:
            continue
        x = spine.locations[idx]
        za = float(profile.v_at(h - g, x[None, :])[0])
        zb = float(v_delta[idx])
        rate = float(mech.kernel.window_rate(np.array([za]), np.array([zb]), x[None, :])[0])
        if rate <= 0.0:
            continue
        if rate > envelope:
            raise SamplerError("jump-immigration envelope violated; rate bound is not monotone")
        if rng.random() * envelope >= rate:
            continue
        if hasattr(mech.kernel, "strength"):
            y = float(mech.kernel.sample_window_mass(za, zb, mech.kernel.strength.at(x), 1, rng)[0])
        else:
            rates_at_x = [r.at(x) for r in mech.kernel.rates]
            y = float(mech.kernel.sample_window_mass(za, zb, rates_at_x, 1, rng)[0])
        clone, _ = _clone_conditioned(mech, motion, x, y, delta, h - g, grid, ctrl, rng, max_attempts)
        events.append(ImmigrationEvent(
            kind="jump", s=float(s), anchor=float(g), location=x.copy(), mass=y, clone=clone,
        ))
    return events


def sample_initial_immigration(mech: BranchingMechanism, motion: MotionModel,
                               mu: ParticleMeasure, h: float, grid, ctrl: ParticleControls,
                               rng, max_attempts: int = 20_000):
    """Trajectory from mu conditioned to die before h (plain rejection).

    Returns (record, attempts); the acceptance rate is the extinction
    probability exp(-<v_h, mu>).
    """
    if mu.is_zero:
        raise SamplerError("initial immigration needs a nonzero mu")
    dt = grid.dt
    n_steps = int(round(h / dt)) - 1  # death strictly before h
    for attempt in range(1, max_attempts + 1):
        rec = sample_superprocess(mech, motion, mu, grid, ctrl, rng, n_steps=n_steps)
        if math.isfinite(rec.extinction_time):
            return rec, attempt
    raise InfeasibleError(
        f"initial-immigration rejection exhausted {max_attempts} attempts",
        acceptance_rate=1.0 / max_attempts,
    )


def _assemble(h: float, dt: float, d: int, initial: TrajectoryRecord,
              events: List[ImmigrationEvent]) -> TrajectoryRecord:
    n = int(round(h / dt))
    times = dt * np.arange(n + 1)
    anchors = [int(round(ev.anchor / dt)) for ev in events]
    measures = []
    for k in range(n + 1):
        parts = []
        if k < len(initial.measures) and not initial.measures[k].is_zero:
            parts.append(initial.measures[k])
        for ev, a in zip(events, anchors):
            j = k - a
            lo = 1 if ev.kind == "continuous" else 0  # excursion clones are null at local 0
            if j < lo or j >= len(ev.clone.measures):
                continue
            m = ev.clone.measures[j]
            if not m.is_zero:
                parts.append(m)
        total = ParticleMeasure.empty(d)
        for p in parts:
            total = total + p
        measures.append(total)
    return TrajectoryRecord(times=times, measures=measures, enforce_trap=False)


def sample_williams(mech: BranchingMechanism, motion: MotionModel, profile: ExtinctionProfile,
                    mu: ParticleMeasure, h: float, delta: float, eps_n: Optional[float],
                    grid, ctrl: ParticleControls, rng, n_spine_particles: int = 256,
                    max_attempts: int = 200_000) -> WilliamsSample:
    """One draw of the conditioned-at-h decomposition.

    The spine start is mu reweighted by w(h, .); the three immigration
    parts are drawn independently given the spine and assembled by atom
    union on the grid.
    """
    dt = grid.dt
    if delta < dt - 1e-12:
        raise SamplerError(f"truncation delta={delta} must be at least the grid step {dt}")
    if abs(round(h / dt) * dt - h) > 1e-9:
        raise SamplerError(f"h={h} is not on the grid")
    if h <= delta + 2 * dt:
        raise SamplerError(f"h={h} leaves no room above the truncation delta={delta}")
    nu = spine_initial_measure(profile, mu, h)
    spine = sample_spine(profile, mech, motion, nu, h, grid, n_spine_particles, rng)
    initial, _ = sample_initial_immigration(mech, motion, mu, h, grid, ctrl, rng, max_attempts)
    events = sample_continuous_immigration(
        spine, profile, mech, motion, h, delta, eps_n, grid, ctrl, rng, max_attempts
    )
    events += sample_jump_immigration(
        spine, profile, mech, motion, h, delta, grid, ctrl, rng, max_attempts
    )
    events.sort(key=lambda ev: ev.s)
    assembled = _assemble(h, dt, mu.d, initial, events)
    return WilliamsSample(
        spine=spine, initial=initial, events=events, assembled=assembled,
        h=h, delta=delta, eps_n=eps_n,
    )


def events_to_csv_rows(samples: List[WilliamsSample]):
    """CSV rows (replica_id, kind, s, x_1.., y_or_eps, clone_extinction_time)."""
    first = True
    for rid, ws in enumerate(samples):
        if first:
            d = ws.initial.d
            cols = ",".join(f"x_{j + 1}" for j in range(d))
            yield f"replica_id,kind,s,{cols},y_or_eps,clone_extinction_time"
            first = False
        for ev in ws.events:
            coords = ",".join(repr(float(c)) for c in ev.location)
            yield (
                f"{rid},{ev.kind},{ev.s!r},{coords},{ev.mass!r},{ev.clone.extinction_time!r}"
            )
