import math

import numpy as np
import pytest

from willdec.extinction import (
    ExtinctionError,
    GreyConditionError,
    SpatialGrid,
    build_profile,
    extinction_cdf,
    homogeneous_profile,
    profile_from_text,
    profile_to_text,
    sample_extinction_time,
    solve_u_f,
    solve_v_homogeneous,
    solve_vw_spatial,
    solve_w_homogeneous,
)
from willdec.measures import ParticleMeasure
from willdec.mechanism import make_mechanism, quadratic_mechanism, stable_mechanism
from willdec.motion import MotionModel

QUAD = quadratic_mechanism(b=1.0)
STABLE = stable_mechanism(c=1.0, a=1.5)
GRID = SpatialGrid(x_lo=-6.0, x_hi=6.0, nx=121, t1=0.05, t_max=6.0, dt=0.01)
BM = MotionModel(kind="brownian", d=1, sigma=1.0, step_dt=0.01)
MU1 = ParticleMeasure.delta([0.0], 1.0)


# ---- homogeneous closed forms ------------------------------------------------

def test_v_quadratic():
    # Riccati closed form v(t) = 1/(b t)
    assert abs(solve_v_homogeneous(QUAD, 1.0) - 1.0) <= 1e-8


def test_v_stable():
    # closed form ((a-1) t)^(-1/(a-1))
    assert abs(solve_v_homogeneous(STABLE, 1.0) - 4.0) <= 1e-6


def test_v_monotone():
    v1, v2 = solve_v_homogeneous(QUAD, 1.0), solve_v_homogeneous(QUAD, 2.0)
    assert v2 == pytest.approx(0.5, abs=1e-8)
    assert v2 < v1


def test_w_quadratic():
    assert abs(solve_w_homogeneous(QUAD, 1.0) - 1.0) <= 1e-8


def test_w_stable():
    assert abs(solve_w_homogeneous(STABLE, 1.0) - 8.0) <= 1e-6


def test_w_nonnegative_and_matches_fd():
    mech = make_mechanism("mixed", b=0.5, stable_c=0.5, stable_a=1.5)
    for t in (0.3, 1.0, 2.5):
        w = solve_w_homogeneous(mech, t)
        assert w >= 0
        fd = (solve_v_homogeneous(mech, t - 1e-5) - solve_v_homogeneous(mech, t + 1e-5)) / 2e-5
        assert w == pytest.approx(fd, rel=1e-5)


def test_v_with_subcritical_drift():
    mech = make_mechanism("quadratic", alpha=-0.5, b=1.0)
    # v(t) = q / (b (e^{q t} - 1)) with q = 0.5
    q = 0.5
    expect = q / (math.expm1(q * 1.0))
    assert solve_v_homogeneous(mech, 1.0) == pytest.approx(expect, abs=1e-9)


def test_grey_failure_refused():
    drift_only = make_mechanism("quadratic", alpha=-1.0, b=0.0)
    with pytest.raises(GreyConditionError):
        solve_v_homogeneous(drift_only, 1.0)


def test_supercritical_refused():
    mech = make_mechanism("quadratic", alpha=0.5, b=1.0)
    with pytest.raises(Exception):
        solve_v_homogeneous(mech, 1.0)


# ---- u_f solver ----------------------------------------------------------------

def test_u_f_constant_matches_ode():
    # constant terminal data + conservative motion: spatially flat solution
    lam = 2.0
    u = solve_u_f(QUAD, BM, np.full(GRID.nx, lam), 0.5, GRID)
    expect = lam / (1.0 + lam * 0.5)  # u' = -u^2 from lam
    assert np.allclose(u, expect, rtol=1e-10)
    spread = u.max() - u.min()
    assert spread < 1e-12


def test_u_f_zero_stays_zero():
    u = solve_u_f(QUAD, BM, np.zeros(GRID.nx), 0.3, GRID)
    assert np.all(u == 0.0)


def test_u_f_short_time_expansion():
    # u = P_t f - t psi(f) + O(t^2): check the remainder shrinks ~ t^2
    from willdec.fields import parse_field
    from willdec.extinction import transition_kernel

    f = parse_field("0.5 + 0.5*gauss")
    mech = make_mechanism("quadratic_spatial", b="0.75 + 0.5*exp(-|x|^2)")
    errs = []
    for t in (0.08, 0.04):
        u = solve_u_f(mech, BM, f, t, GRID)
        n = int(round(t / GRID.dt))
        k = transition_kernel(BM, GRID.x, GRID.dt)
        ptf = f(GRID.x)
        for _ in range(n):
            ptf = k @ ptf
        from willdec.mechanism import psi_vec

        first_order = ptf - t * psi_vec(mech, GRID.x, ptf)
        errs.append(float(np.max(np.abs(u - first_order))))
    assert errs[1] <= errs[0] / 2.5  # ~ quadratic decay in t


# ---- spatial profile ------------------------------------------------------------

SPATIAL_MECH = make_mechanism("quadratic_spatial", b="1 + 0.25*clamp(x1, -1, 1)")


@pytest.fixture(scope="module")
def spatial_profile():
    return solve_vw_spatial(SPATIAL_MECH, BM, GRID)


def test_spatial_profile_matches_homogeneous_when_constant():
    grid = SpatialGrid(x_lo=-3.0, x_hi=3.0, nx=61, t1=0.05, t_max=2.0, dt=0.01)
    prof = solve_vw_spatial(QUAD, BM, grid)
    for t in (0.1, 0.5, 1.0, 2.0):
        ref = solve_v_homogeneous(QUAD, t)
        got = prof.v_at(t, np.array([[0.0]]))[0]
        assert got == pytest.approx(ref, rel=1e-4)


def test_spatial_profile_dominated(spatial_profile):
    # psi >= 0.75 z^2 pointwise => v <= homogeneous bound of b=0.75
    tilde = quadratic_mechanism(b=0.75)
    for t in (0.1, 0.5, 1.5):
        bound = solve_v_homogeneous(tilde, t)
        assert np.all(spatial_profile.v_at(t, GRID.x) <= bound * (1 + 1e-9))


def test_spatial_profile_monotone_and_positive(spatial_profile):
    assert np.all(np.diff(spatial_profile.v_tab, axis=0) <= 1e-12)
    assert np.all(spatial_profile.w_tab >= 0.0)
    # spatial shape: v smaller where branching is stronger (x > 0)
    v = spatial_profile.v_at(0.5, np.array([[-3.0], [3.0]]))
    assert v[1] < v[0]


def test_profile_tail_vanishes(spatial_profile):
    mu = MU1
    assert extinction_cdf(spatial_profile, mu, 6.0) > extinction_cdf(spatial_profile, mu, 1.0)
    assert spatial_profile.v_at(6.0, np.array([[0.0]]))[0] < 0.35


# ---- extinction-time law --------------------------------------------------------

@pytest.fixture(scope="module")
def quad_profile():
    return homogeneous_profile(QUAD, GRID)


def test_extinction_cdf_quadratic(quad_profile):
    assert extinction_cdf(quad_profile, MU1, 1.0) == pytest.approx(math.exp(-1.0), abs=1e-9)
    assert extinction_cdf(quad_profile, MU1, 2.0) == pytest.approx(math.exp(-0.5), abs=1e-9)


def test_extinction_cdf_zero_measure(quad_profile):
    assert extinction_cdf(quad_profile, ParticleMeasure.empty(1), 1.0) == 1.0


def test_extinction_cdf_grid_rejects_below_range(spatial_profile):
    with pytest.raises(ExtinctionError):
        extinction_cdf(spatial_profile, MU1, 0.01)


def test_sample_extinction_time_roundtrip(quad_profile, rng):
    for _ in range(20):
        h, u = sample_extinction_time(quad_profile, MU1, rng)
        assert extinction_cdf(quad_profile, MU1, h) == pytest.approx(u, abs=1e-9)


def test_sample_extinction_time_median(quad_profile, rng):
    n = 4000
    hs = np.array([sample_extinction_time(quad_profile, MU1, rng)[0] for _ in range(n)])
    med = np.median(hs)
    target = 1.0 / math.log(2.0)
    se = 1.0 / (2 * math.sqrt(n) * 0.25 * math.log(2.0) ** 2)  # asymptotic median se, f(m)=F'(m)
    assert abs(med - target) < 5 * se


def test_sample_extinction_time_stable_tail(rng):
    prof = homogeneous_profile(STABLE, GRID)
    n = 20000
    hs = np.array([sample_extinction_time(prof, MU1, rng)[0] for _ in range(n)])
    p_emp = float((hs <= 1.0).mean())
    p_true = math.exp(-4.0)
    se = math.sqrt(p_true * (1 - p_true) / n)
    assert abs(p_emp - p_true) <= 4 * se


def test_sample_extinction_rejects_zero_measure(quad_profile, rng):
    with pytest.raises(ExtinctionError):
        sample_extinction_time(quad_profile, ParticleMeasure.empty(1), rng)


# ---- serialization --------------------------------------------------------------

def test_profile_roundtrip(spatial_profile):
    text = profile_to_text(spatial_profile)
    again = profile_from_text(text)
    assert np.array_equal(again.v_tab, spatial_profile.v_tab)
    assert np.array_equal(again.w_tab, spatial_profile.w_tab)
    assert np.array_equal(again.tgrid, spatial_profile.tgrid)
    assert profile_to_text(again) == text.replace("mode closed_form", "mode grid")


def test_profile_serialisation_deterministic():
    grid = SpatialGrid(x_lo=-2.0, x_hi=2.0, nx=41, t1=0.05, t_max=1.0, dt=0.01)
    a = profile_to_text(solve_vw_spatial(SPATIAL_MECH, BM, grid))
    b = profile_to_text(solve_vw_spatial(SPATIAL_MECH, BM, grid))
    assert a == b


# ---- refinement -----------------------------------------------------------------

def test_grid_refinement_halving():
    grid = SpatialGrid(x_lo=-3.0, x_hi=3.0, nx=61, t1=0.05, t_max=1.0, dt=0.02)
    coarse = solve_vw_spatial(SPATIAL_MECH, BM, grid)
    fine = solve_vw_spatial(SPATIAL_MECH, BM, grid, dt=0.01)
    for t in (0.2, 0.6, 1.0):
        a = coarse.v_at(t, grid.x)
        b = fine.v_at(t, grid.x)
        rel = np.max(np.abs(a - b) / b)
        assert rel < 4 * 2e-3  # claimed profile tolerance 2e-3
