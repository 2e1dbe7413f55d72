import math

import numpy as np
import pytest

from willdec.fields import constant_field, parse_field
from willdec.motion import (
    MotionError,
    MotionModel,
    cemetery,
    is_dead,
    run_paths,
    sample_step,
    semigroup_apply,
    step_points,
    subordinator_increment,
)
from willdec.rngstreams import stream

BM = MotionModel(kind="brownian", d=1, sigma=1.0)


def test_brownian_moments():
    rng = stream(7, 6, 0)
    dt = 0.3
    n = 100_000
    steps = step_points(BM, np.zeros((n, 1)), dt, rng)[:, 0]
    se_mean = math.sqrt(dt / n)
    assert abs(steps.mean()) <= 4 * se_mean
    se_var = dt * math.sqrt(2.0 / n)
    assert abs(steps.var() - dt) <= 4 * se_var


def test_cemetery_absorbing():
    dead = cemetery(2)
    motion = MotionModel(kind="killed_box", d=2, sigma=1.0, box_lo=-1, box_hi=1)
    out = sample_step(motion, dead, 0.1, stream(7, 6, 1))
    assert is_dead(out[None, :])[0]


def test_killed_box_kills_escapes():
    motion = MotionModel(kind="killed_box", d=1, sigma=1.0, box_lo=-0.1, box_hi=0.1)
    rng = stream(7, 6, 2)
    pts = step_points(motion, np.zeros((2000, 1)), 1.0, rng)
    frac_dead = is_dead(pts).mean()
    assert frac_dead > 0.7  # step sd = 1 against a +-0.1 box


def test_cauchy_median():
    # stable-1/2 subordinated Brownian motion: Cauchy(dt) marginals in d=1
    motion = MotionModel(kind="subordinate_bm", d=1, subordinator_index=0.5)
    rng = stream(7, 6, 3)
    dt = 0.37
    inc = step_points(motion, np.zeros((10_000, 1)), dt, rng)[:, 0]
    med = np.median(np.abs(inc))
    assert abs(med - dt * math.tan(math.pi / 4)) <= 0.1 * dt


@pytest.mark.parametrize("q", [0.5, 0.7])
def test_subordinator_laplace_transform(q):
    # E exp(-lam S_dt) = exp(-dt (2 lam)^q), exact samplers
    rng = stream(7, 6, 4)
    dt = 0.5
    n = 200_000
    s = subordinator_increment(q, dt, n, rng)
    for lam in (0.5, 1.0, 3.0):
        est = np.exp(-lam * s)
        target = math.exp(-dt * (2 * lam) ** q)
        se = est.std(ddof=1) / math.sqrt(n)
        assert abs(est.mean() - target) <= 4 * se


def test_half_step_composition_matches_full_step():
    from scipy.stats import ks_2samp

    rng = stream(7, 6, 5)
    n = 5000
    for motion in (BM, MotionModel(kind="subordinate_bm", d=1, subordinator_index=0.5)):
        full = step_points(motion, np.zeros((n, 1)), 0.2, rng)[:, 0]
        half = step_points(motion, step_points(motion, np.zeros((n, 1)), 0.1, rng), 0.1, rng)[:, 0]
        assert ks_2samp(full, half).pvalue >= 0.01


def test_semigroup_constant_exact():
    val, se = semigroup_apply(BM, constant_field(1.0), 0.7, [0.3], 100, stream(7, 6, 6))
    assert val == 1.0 and se == 0.0


def test_semigroup_gauss_closed_form():
    f = parse_field("gauss")
    val, se = semigroup_apply(BM, f, 0.5, [0.0], 10, stream(7, 6, 7))
    assert se == 0.0
    assert val == pytest.approx((1 + 2 * 0.5) ** -0.5, rel=1e-12)
    # Monte Carlo agrees with the closed form
    mc, mc_se = semigroup_apply(BM, f, 0.5, [0.0], 200_000, stream(7, 6, 8), exact=False)
    assert abs(mc - val) <= 4 * mc_se


def test_semigroup_killed_box_submarkov():
    motion = MotionModel(kind="killed_box", d=1, sigma=1.0, box_lo=-2, box_hi=2, step_dt=0.02)
    vals = []
    for t in (0.5, 1.0, 2.0):
        v, _ = semigroup_apply(motion, constant_field(1.0), t, [0.0], 30_000, stream(7, 6, 9))
        vals.append(v)
    assert vals[0] < 1.0
    assert vals[0] > vals[1] > vals[2]


def test_chapman_kolmogorov():
    f = parse_field("clamp(x1, -1, 1)")
    rng_a = stream(7, 6, 10)
    one, se1 = semigroup_apply(BM, f, 0.8, [0.2], 150_000, rng_a, exact=False)
    # two-stage: average of P_t f over the s-step cloud
    rng_b = stream(7, 6, 11)
    n_outer = 400
    mids = step_points(BM, np.full((n_outer, 1), 0.2), 0.3, rng_b)
    inner = np.array([
        semigroup_apply(BM, f, 0.5, m, 400, rng_b, exact=False)[0] for m in mids
    ])
    two = inner.mean()
    se2 = inner.std(ddof=1) / math.sqrt(n_outer)
    assert abs(one - two) <= 4 * math.hypot(se1, se2)


def test_seed_determinism():
    a = run_paths(BM, np.zeros((4, 1)), 0.05, 20, stream(9, 6, 12))
    b = run_paths(BM, np.zeros((4, 1)), 0.05, 20, stream(9, 6, 12))
    assert np.array_equal(a, b)


def test_unbounded_field_rejected():
    with pytest.raises(MotionError):
        semigroup_apply(BM, parse_field("x1"), 0.5, [0.0], 10, stream(7, 6, 13))


def test_bad_dt_rejected():
    with pytest.raises(MotionError):
        sample_step(BM, [0.0], -0.1, stream(7, 6, 14))


def test_dimension_bound():
    with pytest.raises(MotionError):
        MotionModel(kind="brownian", d=4)


def test_drift_diffusion_pulls():
    motion = MotionModel(kind="drift_diffusion", d=1, sigma=0.3,
                         drift=parse_field("clamp(x1, -1, 1)*-1"), step_dt=0.01)
    rng = stream(7, 6, 15)
    pts = np.full((4000, 1), 2.0)
    for _ in range(300):
        pts = step_points(motion, pts, 0.01, rng)
    assert abs(pts.mean()) < 0.5  # mean-reverting toward 0
