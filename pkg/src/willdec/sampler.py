"""Forward samplers for the superprocess and the conditioning weight.

The particle scheme alternates one motion increment with an exact
total-mass transition of the mechanism frozen at the atom's location.
Frozen-coefficient transitions are exact in law for quadratic (any
subcritical drift), pure-drift and stable mechanisms via the cluster
representation: the post-step mass is a Poisson(m v) sum of i.i.d.
cluster masses, where v is the frozen one-point extinction exponent at
the step length.  Stable cluster masses come from a tabulated inverse
Laplace transform (one universal table per stable index, rescaled
exactly); mixed quadratic+stable mechanisms compose the two exact
transitions within a step, which is first-order in the step size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .extinction import ExtinctionProfile
from .measures import MeasureError, ParticleMeasure, TrajectoryRecord
from .mechanism import AtomKernel, BranchingMechanism, StableKernel
from .motion import MotionModel, is_dead, step_points


class SamplerError(RuntimeError):
    pass


class InfeasibleError(SamplerError):
    """A rejection loop exhausted its attempt budget."""

    def __init__(self, message: str, acceptance_rate: float):
        super().__init__(message)
        self.acceptance_rate = acceptance_rate


# ---------------------------------------------------------------------------
# stable cluster table (inverse Laplace transform, built once per index)


class StableClusterTable:
    """Law of the unit-scale cluster mass W for a stable index a.

    W has Laplace transform 1 - (1 + th^(-(a-1)))^(-1/(a-1)) and mean 1;
    the frozen-x stable transition over dt is a Poisson(m v) sum of
    independent copies of W / v, with v the frozen extinction exponent.
    The complementary CDF is recovered on a log grid by fixed-Talbot
    inversion of its Laplace transform and validated against the exact
    transform at 20 test points to 1e-3.
    """

    _cache: dict = {}

    def __init__(self, a: float, n_grid: int = 3000, talbot_m: int = 48):
        self.a = a
        beta = a - 1.0
        w = np.geomspace(1e-7, 1e10, n_grid)

        def transform(s):
            # Laplace transform of the complementary CDF
            return (1.0 + s ** (-beta)) ** (-1.0 / beta) / s

        sf = _talbot_inverse(transform, w, talbot_m)
        sf = np.clip(sf, 0.0, 1.0)
        sf = np.minimum.accumulate(sf)
        self.w = w
        self.cdf = 1.0 - sf
        self.max_transform_error = self._validate(beta)
        if self.max_transform_error > 1e-3:
            raise SamplerError(
                f"stable cluster table for a={a} failed transform validation "
                f"(max error {self.max_transform_error:.2e})"
            )

    def _validate(self, beta: float) -> float:
        lams = np.geomspace(0.02, 50.0, 20)
        # E exp(-lam W) from the table, by parts on the complementary CDF:
        # phi(lam) = 1 - lam * int exp(-lam w) SF(w) dw
        worst = 0.0
        sf = 1.0 - self.cdf
        for lam in lams:
            integrand = np.exp(-lam * self.w) * sf
            est = 1.0 - lam * np.trapezoid(integrand, self.w) - math.exp(-lam * self.w[0]) * self.cdf[0]
            exact = 1.0 - (1.0 + lam ** (-beta)) ** (-1.0 / beta)
            worst = max(worst, abs(est - exact))
        return worst

    def sample(self, n: int, rng) -> np.ndarray:
        u = rng.random(n)
        lo, hi = self.cdf[0], self.cdf[-1]
        u = lo + u * (hi - lo)  # fold the (negligible) untabulated tails in
        return np.exp(np.interp(u, self.cdf, np.log(self.w)))

    @classmethod
    def for_index(cls, a: float) -> "StableClusterTable":
        key = round(a, 12)
        if key not in cls._cache:
            cls._cache[key] = cls(a)
        return cls._cache[key]


class StableMassTable:
    """Quantile table for the critical stable mass transition.

    For psi(z) = z^a the transition from mass m over dt scales exactly:
    X_dt^(m) = m * X_tau^(1) with tau = dt / m^(a-1) (and a strength c
    enters as the time change tau -> c tau), so one table per index
    covers every (mass, step) pair.  The unit law along a geometric
    tau grid is built by exact distributional recursion: by the
    branching property X_tau = (A + B) / 2 with A, B independent copies
    of X at 2^(a-1) tau, so a large sample cloud seeded by direct
    cluster sampling at a coarse tau is convolution-squared downward.
    The extinction atom exp(-v(tau)) is exact; coarse tau (survival
    below ~5 percent) falls back to per-call cluster sampling with a
    size-truncated Poisson count.  Every tabulated row is validated
    against the exact Laplace transform at 20 test points to 1e-3.
    """

    _cache: dict = {}
    _BUILD_SEED = 0x5AB1E  # table is a deterministic artifact

    def __init__(self, a: float, n_cloud: int = 1_200_000):
        self.a = a
        beta = a - 1.0
        self.beta = beta
        v_switch = 0.05
        tau_switch = v_switch ** (-beta) / beta
        tau_min_target = 1e-9
        n_tau = int(math.ceil(math.log(tau_switch / tau_min_target) / (beta * math.log(2.0)))) + 1
        # descending grid tau_k = tau_switch * 2^(-beta k)
        taus = tau_switch * 2.0 ** (-beta * np.arange(n_tau))
        self.cluster = StableClusterTable.for_index(a)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(self._BUILD_SEED)))

        u_grid = np.unique(np.concatenate([
            np.linspace(1e-6, 0.985, 480), 1.0 - np.geomspace(1.4e-2, 5e-7, 240)]))
        self.u_grid = u_grid
        quant = np.empty((n_tau, len(u_grid)))

        v0 = (beta * taus[0]) ** (-1.0 / beta)
        counts = rng.poisson(v0, n_cloud)
        cloud = np.zeros(n_cloud)
        k = int(counts.sum())
        if k:
            cloud = _grouped_sums(self.cluster.sample(k, rng) / v0, counts)
        quant[0] = np.quantile(cloud[cloud > 0], u_grid)
        for i in range(1, n_tau):
            perm = rng.permutation(n_cloud)
            cloud = 0.5 * (cloud + cloud[perm])
            quant[i] = np.quantile(cloud[cloud > 0], u_grid)

        # ascending tau order for interpolation
        self.log_tau = np.log(taus[::-1].copy())
        self.log_quant = np.log(quant[::-1].copy())
        self.tau_switch = tau_switch
        self.max_transform_error = self._validate()
        if self.max_transform_error > 1e-3:
            raise SamplerError(
                f"stable transition table for a={a} failed transform validation "
                f"(max error {self.max_transform_error:.2e})"
            )

    def _validate(self) -> float:
        beta = self.beta
        worst = 0.0
        du = np.diff(np.concatenate([[0.0], self.u_grid]))
        for i in range(0, len(self.log_tau), max(1, len(self.log_tau) // 8)):
            tau = math.exp(self.log_tau[i])
            v = (beta * tau) ** (-1.0 / beta)
            q = np.exp(self.log_quant[i])
            lams = np.geomspace(0.05 * min(v, 1.0), 20.0 * min(v, 1e6), 20)
            for lam in lams:
                est_pos = float(np.sum(np.exp(-lam * q) * du))
                surv = -math.expm1(-v)
                est = (1.0 - surv) + surv * est_pos
                u_l = (lam ** (-beta) + beta * tau) ** (-1.0 / beta)
                worst = max(worst, abs(est - math.exp(-u_l)))
        return worst

    def _sample_positive_coarse(self, tau: np.ndarray, rng) -> np.ndarray:
        """Cluster sampling given survival (coarse tau: few clusters)."""
        beta = self.beta
        v = (beta * tau) ** (-1.0 / beta)
        # size-truncated Poisson count (N >= 1) by inverse CDF over k
        kmax = 30
        ks = np.arange(1, kmax + 1)
        logpmf = ks[None, :] * np.log(v[:, None]) - np.cumsum(np.log(ks))[None, :]
        pmf = np.exp(logpmf - logpmf.max(axis=1, keepdims=True))
        cdf = np.cumsum(pmf, axis=1)
        cdf /= cdf[:, -1:]
        counts = 1 + (rng.random((len(tau), 1)) > cdf).sum(axis=1)
        total = int(counts.sum())
        draws = self.cluster.sample(total, rng) / np.repeat(v, counts)
        return _grouped_sums(draws, counts)

    def sample_positive(self, tau: np.ndarray, rng) -> np.ndarray:
        """Draw from the unit-mass transition conditioned positive."""
        tau = np.asarray(tau, dtype=float)
        out = np.empty(len(tau))
        coarse = tau > self.tau_switch
        if coarse.any():
            out[coarse] = self._sample_positive_coarse(tau[coarse], rng)
        fine = ~coarse
        if fine.any():
            log_tau = np.clip(np.log(tau[fine]), self.log_tau[0], self.log_tau[-1])
            pos = np.searchsorted(self.log_tau, log_tau).clip(1, len(self.log_tau) - 1)
            frac = (log_tau - self.log_tau[pos - 1]) / (self.log_tau[pos] - self.log_tau[pos - 1])
            u = rng.random(int(fine.sum()))
            vals = np.empty(len(u))
            u_hi = self.u_grid[-1]
            for i in np.unique(pos):
                sel = pos == i
                q_lo = np.interp(u[sel], self.u_grid, self.log_quant[i - 1])
                q_hi = np.interp(u[sel], self.u_grid, self.log_quant[i])
                vals[sel] = np.exp((1.0 - frac[sel]) * q_lo + frac[sel] * q_hi)
            # Pareto extension of the untabulated extreme tail (index a)
            tail = u > u_hi
            if tail.any():
                vals[tail] *= ((1.0 - u_hi) / (1.0 - u[tail])) ** (1.0 / self.a)
            out[fine] = vals
        return out

    @classmethod
    def for_index(cls, a: float) -> "StableMassTable":
        key = round(a, 12)
        if key not in cls._cache:
            cls._cache[key] = cls(a)
        return cls._cache[key]


def _talbot_inverse(transform, t: np.ndarray, m: int) -> np.ndarray:
    """Fixed-Talbot inversion of a Laplace transform at the points t."""
    k = np.arange(1, m)
    theta = k * math.pi / m
    cot = 1.0 / np.tan(theta)
    delta = np.empty(m, dtype=complex)
    delta[0] = 2.0 * m / 5.0
    delta[1:] = (2.0 * math.pi / 5.0) * k * (cot + 1j)
    gamma = np.empty(m, dtype=complex)
    gamma[0] = 0.5 * np.exp(delta[0])
    gamma[1:] = (1.0 + 1j * theta * (1.0 + cot ** 2) - 1j * cot) * np.exp(delta[1:])
    s = delta[None, :] / t[:, None]
    vals = transform(s)
    return (0.4 / t) * np.sum((gamma[None, :] * vals).real, axis=1)


# ---------------------------------------------------------------------------
# exact frozen-coefficient mass transitions


def _gamma_sum(rng, counts: np.ndarray, scale) -> np.ndarray:
    """Sum of `counts` i.i.d. exponentials with the given scale, per entry."""
    return rng.gamma(counts.astype(float), scale)


def _grouped_sums(draws: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Per-group sums of consecutive draws; zero-count groups give 0."""
    out = np.zeros(len(counts))
    if len(draws) == 0:
        return out
    edges = np.concatenate([[0], np.cumsum(counts)])[:-1].clip(max=len(draws) - 1).astype(int)
    sums = np.add.reduceat(draws, edges)
    sums[counts == 0] = 0.0
    return sums


def quadratic_transition(m: np.ndarray, alpha, b, dt: float, rng) -> np.ndarray:
    """Exact mass transition for psi = -alpha z + b z^2 over dt (b > 0)."""
    m = np.asarray(m, dtype=float)
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), m.shape)
    b = np.broadcast_to(np.asarray(b, dtype=float), m.shape)
    out = np.zeros_like(m)
    pos = (m > 0) & (b > 0)
    if pos.any():
        m_p, b_p, a_p = m[pos], b[pos], alpha[pos]
        if a_p.any():
            grow = np.exp(a_p * dt)
            bigb = np.where(a_p == 0.0, b_p * dt,
                            b_p * np.expm1(a_p * dt) / np.where(a_p == 0.0, 1.0, a_p))
            lam = m_p * grow / bigb
        else:
            bigb = b_p * dt
            lam = m_p / bigb
        counts = rng.poisson(lam)
        out[pos] = _gamma_sum(rng, counts, bigb)
    drift_only = (m > 0) & (b == 0.0)
    if drift_only.any():
        out[drift_only] = m[drift_only] * np.exp(alpha[drift_only] * dt)
    return out


def stable_transition(m: np.ndarray, alpha, c, a: float, dt: float, rng,
                      table=None, max_clusters: float = 5e6) -> np.ndarray:
    """Exact mass transition for psi = -alpha z + c z^a over dt (c > 0).

    The critical case goes through the scaled quantile table (one lookup
    per atom).  A subcritical drift breaks the scaling, so that case
    falls back to the Poisson cluster representation, whose cost grows
    like the expected cluster count m v(dt); a guard rejects budgets
    that would exceed max_clusters in one call.
    """
    m = np.asarray(m, dtype=float)
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), m.shape)
    c = np.broadcast_to(np.asarray(c, dtype=float), m.shape)
    beta = a - 1.0
    out = np.zeros_like(m)
    pos = (m > 0) & (c > 0)
    critical = pos & (alpha == 0.0)
    if critical.any():
        if table is None or not isinstance(table, StableMassTable):
            table = StableMassTable.for_index(a)
        mm, cc = m[critical], c[critical]
        tau = cc * dt / mm ** beta
        v_tau = (beta * tau) ** (-1.0 / beta)
        dead = rng.random(len(mm)) < np.exp(-v_tau)
        vals = np.zeros(len(mm))
        if (~dead).any():
            vals[~dead] = mm[~dead] * table.sample_positive(tau[~dead], rng)
        out[critical] = vals
    drifted = pos & (alpha != 0.0)
    if drifted.any():
        cluster = StableClusterTable.for_index(a)
        q = -alpha[drifted]
        cd, md = c[drifted], m[drifted]
        grow = np.exp(q * beta * dt)
        with np.errstate(invalid="ignore", divide="ignore"):
            dd = np.where(q == 0.0, cd * beta * dt,
                          (cd / np.where(q == 0.0, 1.0, q)) * (grow - 1.0))
        v = dd ** (-1.0 / beta)
        lam = md * v
        if lam.sum() > max_clusters:
            raise SamplerError(
                "drifted stable transition would need %.2g clusters; "
                "use a coarser step or the critical table path" % lam.sum()
            )
        cluster_scale = (dd / grow) ** (1.0 / beta)
        counts = rng.poisson(lam)
        k = int(counts.sum())
        draws = cluster.sample(k, rng) * np.repeat(cluster_scale, counts) if k else np.empty(0)
        out[drifted] = _grouped_sums(draws, counts)
    drift_only = (m > 0) & (c == 0.0)
    if drift_only.any():
        out[drift_only] = m[drift_only] * np.exp(alpha[drift_only] * dt)
    return out


class MassTransition:
    """Dispatches the frozen-x transition for a mechanism.

    For mixed quadratic+stable mechanisms the two exact transitions are
    composed within the step (quadratic first), a first-order-in-dt
    approximation of the joint law.
    """

    def __init__(self, mech: BranchingMechanism):
        self.mech = mech
        if isinstance(mech.kernel, AtomKernel):
            raise SamplerError("mass transitions for finite-atom kernels are not implemented")
        self.has_stable = isinstance(mech.kernel, StableKernel)
        self.table = StableMassTable.for_index(mech.kernel.index) if self.has_stable else None

    def apply(self, m: np.ndarray, pts: np.ndarray, dt: float, rng) -> np.ndarray:
        alpha = self.mech.alpha(pts)
        b = self.mech.b(pts)
        if self.has_stable:
            c = self.mech.kernel.strength(pts)
            a = self.mech.kernel.index
            if (b > 0).any():
                m = quadratic_transition(m, alpha, b, dt, rng)
                return stable_transition(m, np.zeros_like(alpha), c, a, dt, rng, self.table)
            return stable_transition(m, alpha, c, a, dt, rng, self.table)
        return quadratic_transition(m, alpha, b, dt, rng)

    def apply_homogeneous(self, m: np.ndarray, dt: float, rng) -> np.ndarray:
        return self.apply(m, np.zeros((len(np.atleast_1d(m)), 1)), dt, rng)


def sample_csbp_exact(b: float, m: float, t: float, rng) -> float:
    """Exact critical-quadratic total-mass transition over t.

    Poisson(m / (b t)) many exponential clusters with mean b t; the zero
    measure is a trap.
    """
    if t <= 0:
        raise SamplerError(f"t must be positive, got {t}")
    if m < 0:
        raise SamplerError("mass must be nonnegative")
    if m == 0.0:
        return 0.0
    n = rng.poisson(m / (b * t))
    if n == 0:
        return 0.0
    return float(rng.gamma(float(n), b * t))


# ---------------------------------------------------------------------------
# particle scheme


@dataclass(frozen=True)
class ParticleControls:
    """Mass floor kappa (split threshold 2*kappa) and atom-count ceiling."""

    kappa: float = math.inf
    max_atoms: int = 200_000


def _split_atoms(locs: np.ndarray, masses: np.ndarray, kappa: float):
    if not math.isfinite(kappa):
        return locs, masses
    over = masses > 2.0 * kappa
    if not over.any():
        return locs, masses
    j = np.zeros(len(masses), dtype=int)
    j[over] = np.ceil(np.log2(masses[over] / (2.0 * kappa))).astype(int)
    counts = 2 ** j
    return np.repeat(locs, counts, axis=0), np.repeat(masses / counts, counts)


def sample_superprocess(mech: BranchingMechanism, motion: MotionModel, mu: ParticleMeasure,
                        grid, ctrl: ParticleControls, rng,
                        n_steps: Optional[int] = None) -> TrajectoryRecord:
    """Operator-split particle trajectory from mu on the dt grid.

    Per step each atom moves one motion increment, then its mass is
    replaced by the exact frozen-location transition; atoms above twice
    the mass floor split into equal halves with independent futures, and
    atoms at zero (or killed motion) are removed.
    """
    dt = grid.dt
    if n_steps is None:
        n_steps = int(round(grid.t_max / dt))
    trans = MassTransition(mech)
    locs, masses = mu.locations.copy(), mu.masses.copy()
    d = mu.d
    times = dt * np.arange(n_steps + 1)
    measures = [ParticleMeasure(locs, masses) if len(masses) else ParticleMeasure.empty(d)]
    for _ in range(n_steps):
        if len(masses) == 0:
            measures.append(ParticleMeasure.empty(d))
            continue
        locs = step_points(motion, locs, dt, rng)
        dead = is_dead(locs)
        masses = np.where(dead, 0.0, masses)
        masses = trans.apply(masses, locs, dt, rng)
        masses[dead] = 0.0
        keep = masses > 0
        locs, masses = locs[keep], masses[keep]
        locs, masses = _split_atoms(locs, masses, ctrl.kappa)
        if len(masses) > ctrl.max_atoms:
            raise SamplerError(
                f"atom count {len(masses)} exceeded the ceiling {ctrl.max_atoms}"
            )
        measures.append(ParticleMeasure(locs, masses) if len(masses) else ParticleMeasure.empty(d))
    return TrajectoryRecord(times=times, measures=measures)


def sample_conditioned_direct(mech: BranchingMechanism, motion: MotionModel, mu: ParticleMeasure,
                              h: float, eps: float, grid, ctrl: ParticleControls, rng,
                              max_attempts: int = 100_000):
    """Rejection sampler for trajectories with grid death time in [h, h+eps).

    Returns (record, attempts).  eps below the grid step is rejected
    rather than silently coarsened.
    """
    dt = grid.dt
    if eps < dt - 1e-12:
        raise SamplerError(f"conditioning width eps={eps} is below the grid step dt={dt}")
    if abs(round(h / dt) * dt - h) > 1e-9:
        raise SamplerError(f"target extinction time h={h} is not on the grid")
    n_steps = int(round((h + eps) / dt))  # death observed strictly before h+eps
    for attempt in range(1, max_attempts + 1):
        rec = sample_superprocess(mech, motion, mu, grid, ctrl, rng, n_steps=n_steps)
        if h - 1e-12 <= rec.extinction_time < h + eps - 1e-12:
            return rec, attempt
    raise InfeasibleError(
        f"no trajectory with death time in [{h}, {h + eps}) in {max_attempts} attempts",
        acceptance_rate=0.0 if max_attempts == 0 else 1.0 / max_attempts,
    )


def conditioning_weight(profile: ExtinctionProfile, mu: ParticleMeasure, h: float, t: float,
                        xt: ParticleMeasure) -> float:
    """Martingale weight of the extinction-time conditioning at time t < h.

    <w_{h-t}, X_t> exp(-<v_{h-t}, X_t>) normalised by its time-zero value.
    """
    if not 0 <= t < h:
        raise SamplerError(f"need 0 <= t < h, got t={t}, h={h}")
    w_h = mu.pair_values(profile.w_at(h, mu.locations))
    if w_h <= 0.0:
        raise SamplerError("degenerate conditioning: <w_h, mu> = 0")
    denom = w_h * math.exp(-mu.pair_values(profile.v_at(h, mu.locations)))
    if xt.is_zero:
        return 0.0
    num = xt.pair_values(profile.w_at(h - t, xt.locations)) * math.exp(
        -xt.pair_values(profile.v_at(h - t, xt.locations))
    )
    return num / denom


# ---------------------------------------------------------------------------
# vectorised total-mass chains (verification fast path, homogeneous laws)


def homogeneous_mass_chains(mech: BranchingMechanism, m0, dt: float, n_steps: int,
                            n_chains: int, rng, record_steps: Sequence[int] = ()):
    """Total-mass chains of the particle scheme for a constant mechanism.

    For spatially constant mechanisms the total mass is autonomous and
    its law under the particle scheme does not depend on the motion or
    on atom splitting, so the chains below are equal in law to the total
    mass of sample_superprocess on the same grid.  Returns
    (recorded (len(record_steps), n_chains), ext_step (n_chains,) with
    n_steps+1 meaning alive at the end).
    """
    if not mech.is_homogeneous:
        raise SamplerError("mass-chain fast path requires a spatially constant mechanism")
    trans = MassTransition(mech)
    m = np.broadcast_to(np.asarray(m0, dtype=float), (n_chains,)).copy()
    ext = np.full(n_chains, n_steps + 1, dtype=int)
    record_steps = list(record_steps)
    recorded = np.zeros((len(record_steps), n_chains))
    rec_map = {s: i for i, s in enumerate(record_steps)}
    if 0 in rec_map:
        recorded[rec_map[0]] = m
    for k in range(1, n_steps + 1):
        live = m > 0
        if live.any():
            m[live] = trans.apply_homogeneous(m[live], dt, rng)
            died = live & (m == 0.0)
            ext[died] = k
        if k in rec_map:
            recorded[rec_map[k]] = m
    return recorded, ext
