import math

import numpy as np
import pytest

from willdec.extinction import SpatialGrid, extinction_cdf, homogeneous_profile
from willdec.measures import ParticleMeasure
from willdec.mechanism import make_mechanism, quadratic_mechanism, stable_mechanism
from willdec.motion import MotionModel
from willdec.rngstreams import stream
from willdec.sampler import (
    MassTransition,
    ParticleControls,
    SamplerError,
    StableClusterTable,
    conditioning_weight,
    homogeneous_mass_chains,
    sample_conditioned_direct,
    sample_csbp_exact,
    sample_superprocess,
    stable_transition,
)
from willdec.verify import ks_two_sample

QUAD = quadratic_mechanism(b=1.0)
STABLE = stable_mechanism(c=1.0, a=1.5)
GRID = SpatialGrid(x_lo=-6.0, x_hi=6.0, nx=121, t1=0.05, t_max=6.0, dt=0.01)
BM = MotionModel(kind="brownian", d=1, sigma=1.0, step_dt=0.01)
MU1 = ParticleMeasure.delta([0.0], 1.0)
CTRL = ParticleControls(kappa=math.inf)


# ---- exact critical-quadratic transition --------------------------------------

def test_csbp_zero_trap():
    assert sample_csbp_exact(1.0, 0.0, 1.0, stream(1, 1)) == 0.0


def test_csbp_rejects_bad_t():
    with pytest.raises(SamplerError):
        sample_csbp_exact(1.0, 1.0, 0.0, stream(1, 1))


def test_csbp_extinction_probability_and_mean():
    rng = stream(1, 2)
    n = 100_000
    vals = np.array([sample_csbp_exact(1.0, 1.0, 1.0, rng) for _ in range(n)])
    p0 = (vals == 0.0).mean()
    target = math.exp(-1.0)
    se = math.sqrt(target * (1 - target) / n)
    assert abs(p0 - target) <= 4 * se
    se_mean = vals.std(ddof=1) / math.sqrt(n)
    assert abs(vals.mean() - 1.0) <= 4 * se_mean


def test_csbp_laplace_transform():
    rng = stream(1, 3)
    n = 60_000
    vals = np.array([sample_csbp_exact(1.0, 1.0, 0.5, rng) for _ in range(n)])
    for lam in (0.3, 1.0, 4.0):
        est = np.exp(-lam * vals)
        target = math.exp(-lam / (1 + lam * 0.5))
        se = est.std(ddof=1) / math.sqrt(n)
        assert abs(est.mean() - target) <= 4 * se


# ---- stable cluster table -------------------------------------------------------

def test_stable_table_validated():
    table = StableClusterTable.for_index(1.5)
    assert table.max_transform_error <= 1e-3


def test_stable_transition_law():
    # P(dead) = exp(-m v(t)) and E = m for the critical stable mechanism
    rng = stream(1, 4)
    n = 60_000
    m = np.full(n, 1.0)
    out = stable_transition(m, 0.0, 1.0, 1.5, 1.0, rng)
    p0 = (out == 0.0).mean()
    target = math.exp(-4.0)  # v(1) = 4
    se = math.sqrt(target * (1 - target) / n)
    assert abs(p0 - target) <= 4 * se
    se_mean = out.std(ddof=1) / math.sqrt(n)
    assert abs(out.mean() - 1.0) <= 5 * se_mean  # heavy tail: generous margin


def test_stable_transition_laplace():
    rng = stream(1, 5)
    n = 80_000
    out = stable_transition(np.full(n, 0.7), 0.0, 1.0, 1.5, 0.4, rng)
    a = 1.5
    for lam in (0.5, 2.0, 8.0):
        u = (lam ** (1 - a) + (a - 1) * 0.4) ** (-1 / (a - 1))
        target = math.exp(-0.7 * u)
        est = np.exp(-lam * out)
        se = est.std(ddof=1) / math.sqrt(n)
        assert abs(est.mean() - target) <= 4 * se + 2e-3  # table bias allowance


# ---- particle scheme ------------------------------------------------------------

def test_superprocess_empty_input():
    rec = sample_superprocess(QUAD, BM, ParticleMeasure.empty(1), GRID, CTRL, stream(1, 6), n_steps=50)
    assert rec.extinction_time == 0.0
    assert all(m.is_zero for m in rec.measures)


def test_superprocess_total_mass_matches_exact_csbp():
    rng = stream(1, 7)
    n = 4000
    masses = np.empty(n)
    for i in range(n):
        rec = sample_superprocess(QUAD, BM, MU1, GRID, CTRL, rng, n_steps=100)
        masses[i] = rec.measures[-1].total_mass
    exact = np.array([sample_csbp_exact(1.0, 1.0, 1.0, rng) for _ in range(n)])
    # one-step exact transition vs 100-step chain: equal in law
    _, p = ks_two_sample(masses, exact)
    assert p >= 0.01


def test_superprocess_extinction_frequency():
    profile = homogeneous_profile(QUAD, GRID)
    rng = stream(1, 8)
    n = 3000
    dead = 0
    for _ in range(n):
        rec = sample_superprocess(QUAD, BM, MU1, GRID, CTRL, rng, n_steps=100)
        dead += rec.extinction_time <= 1.0 + 1e-12
    target = extinction_cdf(profile, MU1, 1.0)
    se = math.sqrt(target * (1 - target) / n)
    assert abs(dead / n - target) <= 4 * se


def test_superprocess_zero_trap_absorbing():
    rng = stream(1, 9)
    for _ in range(50):
        rec = sample_superprocess(QUAD, BM, MU1, GRID, CTRL, rng, n_steps=120)
        if math.isfinite(rec.extinction_time):
            k = int(round(rec.extinction_time / GRID.dt))
            assert all(m.is_zero for m in rec.measures[k:])


def test_superprocess_splitting_bounds_atom_mass():
    ctrl = ParticleControls(kappa=0.05)
    rng = stream(1, 10)
    rec = sample_superprocess(QUAD, BM, ParticleMeasure.delta([0.0], 2.0), GRID, ctrl, rng, n_steps=60)
    for m in rec.measures[1:]:
        if not m.is_zero:
            assert m.masses.max() <= 4 * 0.05 + 1e-12  # one growth step above the split bound


def test_superprocess_atom_ceiling():
    ctrl = ParticleControls(kappa=1e-4, max_atoms=30)
    with pytest.raises(SamplerError):
        sample_superprocess(QUAD, BM, MU1, GRID, ctrl, stream(1, 11), n_steps=50)


def test_seed_determinism_byte_identical():
    from willdec.measures import trajectories_to_csv_rows

    a = sample_superprocess(QUAD, BM, MU1, GRID, CTRL, stream(42, 12), n_steps=80)
    b = sample_superprocess(QUAD, BM, MU1, GRID, CTRL, stream(42, 12), n_steps=80)
    assert "\n".join(trajectories_to_csv_rows([a])) == "\n".join(trajectories_to_csv_rows([b]))


def test_mass_chain_fast_path_matches_records():
    rng = stream(1, 13)
    rec_masses = np.empty(2500)
    for i in range(2500):
        rec = sample_superprocess(STABLE, BM, MU1, GRID, CTRL, rng, n_steps=50)
        rec_masses[i] = rec.measures[-1].total_mass
    chain, _ = homogeneous_mass_chains(STABLE, 1.0, GRID.dt, 50, 2500, stream(1, 14), [50])
    _, p = ks_two_sample(rec_masses, chain[0])
    assert p >= 0.01


# ---- conditioned-direct sampler ---------------------------------------------------

def test_conditioned_direct_window_and_rate():
    profile = homogeneous_profile(QUAD, GRID)
    rng = stream(1, 15)
    h, eps = 1.0, 0.02
    attempts_log = []
    for _ in range(12):
        rec, attempts = sample_conditioned_direct(QUAD, BM, MU1, h, eps, GRID, CTRL, rng,
                                                  max_attempts=100_000)
        assert h - 1e-12 <= rec.extinction_time < h + eps - 1e-12
        attempts_log.append(attempts)
    # geometric attempts with success probability ~ F(h+eps-dt) - F(h-dt)
    p_grid = (math.exp(-1.0 / (h + eps - GRID.dt)) - math.exp(-1.0 / (h - GRID.dt)))
    mean_attempts = np.mean(attempts_log)
    se = (1 / p_grid) / math.sqrt(len(attempts_log))  # geometric sd ~ 1/p
    assert abs(mean_attempts - 1 / p_grid) <= 4 * se


def test_conditioned_direct_rejects_small_eps():
    with pytest.raises(SamplerError):
        sample_conditioned_direct(QUAD, BM, MU1, 1.0, 0.001, GRID, CTRL, stream(1, 16))


def test_conditioned_direct_off_grid_h():
    with pytest.raises(SamplerError):
        sample_conditioned_direct(QUAD, BM, MU1, 1.005, 0.02, GRID, CTRL, stream(1, 17))


# ---- conditioning weight ----------------------------------------------------------

def test_weight_at_zero_is_one():
    profile = homogeneous_profile(QUAD, GRID)
    assert conditioning_weight(profile, MU1, 1.0, 0.0, MU1) == pytest.approx(1.0, rel=1e-12)


def test_weight_closed_form():
    profile = homogeneous_profile(QUAD, GRID)
    m = 0.8
    xt = ParticleMeasure.delta([0.3], m)
    # v(0.5) = 2, w(0.5) = 4; denominator w(1)=1, v(1)=1
    expect = (4 * m * math.exp(-2 * m)) / (1.0 * math.exp(-1.0))
    got = conditioning_weight(profile, MU1, 1.0, 0.5, xt)
    assert got == pytest.approx(expect, rel=1e-9)


def test_weight_martingale_mean():
    profile = homogeneous_profile(QUAD, GRID)
    rng = stream(1, 18)
    n = 10_000
    h, t = 1.0, 0.5
    rec, _ = homogeneous_mass_chains(QUAD, 1.0, GRID.dt, 50, n, rng, [50])
    m = rec[0]
    vals = 4.0 * m * np.exp(-2.0 * m) / (1.0 * math.exp(-1.0))
    se = vals.std(ddof=1) / math.sqrt(n)
    assert abs(vals.mean() - 1.0) <= 4 * se
    # second time point: t = 0.25 (v(3/4)=4/3, w(3/4)=16/9)
    rec2, _ = homogeneous_mass_chains(QUAD, 1.0, GRID.dt, 25, n, stream(1, 19), [25])
    m2 = rec2[0]
    vals2 = (16.0 / 9.0) * m2 * np.exp(-(4.0 / 3.0) * m2) / (1.0 * math.exp(-1.0))
    se2 = vals2.std(ddof=1) / math.sqrt(n)
    assert abs(vals2.mean() - 1.0) <= 4 * se2


def test_weight_degenerate_rejected():
    profile = homogeneous_profile(QUAD, GRID)
    with pytest.raises(SamplerError):
        conditioning_weight(profile, ParticleMeasure.empty(1), 1.0, 0.5, MU1)


def test_conditioned_mean_matches_weighted_mean():
    # E[mass at h/2 | grid death in bin] vs weight-reweighted unconditioned mean
    rng = stream(1, 20)
    h, eps, t = 1.0, 0.02, 0.5
    step_t = int(round(t / GRID.dt))
    n_steps = int(round((h + eps) / GRID.dt))
    rec, ext = homogeneous_mass_chains(QUAD, 1.0, GRID.dt, n_steps, 200_000, rng, [step_t])
    lo, hi = int(round(h / GRID.dt)), int(round((h + eps) / GRID.dt))
    sel = (ext >= lo) & (ext < hi)
    cond_vals = rec[0][sel]
    cond_mean = cond_vals.mean()
    cond_se = cond_vals.std(ddof=1) / math.sqrt(sel.sum())
    m = rec[0]
    weights = 4.0 * m * np.exp(-2.0 * m) / math.exp(-1.0)
    w_mean = float((m * weights).mean())  # E[m M] with E[M] = 1
    w_se = float((m * weights).std(ddof=1) / math.sqrt(len(m)))
    assert abs(cond_mean - w_mean) <= 4 * math.hypot(cond_se, w_se) + 0.05 * w_mean
