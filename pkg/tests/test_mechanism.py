import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from willdec.mechanism import (
    MechanismError,
    grey_check,
    jump_integral_quadrature,
    make_mechanism,
    psi,
    psi_prime,
    quadratic_mechanism,
    stable_mechanism,
)

X0 = np.array([0.0])


def test_psi_quadratic_direct():
    mech = quadratic_mechanism(b=1.0)
    assert psi(mech, X0, 2.0) == pytest.approx(4.0)


def test_psi_zero_is_zero():
    for mech in (quadratic_mechanism(), stable_mechanism(), make_mechanism("mixed", b=0.3, stable_c=0.2)):
        assert psi(mech, X0, 0.0) == 0.0


def test_psi_stable_closed_form_vs_quadrature():
    mech = stable_mechanism(c=1.0, a=1.5)
    assert psi(mech, X0, 4.0) == pytest.approx(8.0, rel=1e-10)
    quad_val = jump_integral_quadrature(mech, X0, 4.0)
    assert quad_val == pytest.approx(8.0, rel=1e-6)


def test_psi_rejects_negative_z():
    with pytest.raises(MechanismError):
        psi(quadratic_mechanism(), X0, -1.0)
    with pytest.raises(MechanismError):
        psi_prime(quadratic_mechanism(), X0, -0.5)


def test_psi_prime_quadratic():
    assert psi_prime(quadratic_mechanism(b=1.0), X0, 3.0) == pytest.approx(6.0)


def test_psi_prime_pure_drift():
    mech = make_mechanism("quadratic", alpha=0.5, b=0.0)
    assert psi_prime(mech, X0, 7.0) == pytest.approx(-0.5)


def test_psi_prime_stable_closed_form():
    mech = stable_mechanism(c=1.0, a=1.5)
    assert psi_prime(mech, X0, 4.0) == pytest.approx(3.0, rel=1e-10)


@pytest.mark.parametrize("z", [0.1, 0.5, 2.0, 10.0])
def test_psi_prime_matches_finite_difference(z):
    mech = make_mechanism("mixed", alpha=-0.2, b=0.7, stable_c=0.4, stable_a=1.3)
    exact = psi_prime(mech, X0, z)
    for delta in (1e-3, 1e-4):
        fd = (psi(mech, X0, z + delta) - psi(mech, X0, z - delta)) / (2 * delta)
        # second-order accurate: curvature-limited at the coarser delta
        assert fd == pytest.approx(exact, rel=max(1e-6, 40 * delta ** 2), abs=1e-8)
    fd = (psi(mech, X0, z + 1e-4) - psi(mech, X0, z - 1e-4)) / 2e-4
    assert fd == pytest.approx(exact, rel=1e-6)
    # Richardson trend: the smaller delta should not be worse
    fd3 = (psi(mech, X0, z + 1e-3) - psi(mech, X0, z - 1e-3)) / 2e-3
    fd4 = (psi(mech, X0, z + 1e-4) - psi(mech, X0, z - 1e-4)) / 2e-4
    assert abs(fd4 - exact) <= abs(fd3 - exact) + 1e-10


def test_atom_kernel_psi_and_prime():
    mech = make_mechanism("atoms", atoms=[(2.0, 0.5)])
    z = 1.3
    expect = 0.5 * (math.exp(-2.0 * z) - 1 + 2.0 * z)
    assert psi(mech, X0, z) == pytest.approx(expect)
    expect_p = 0.5 * 2.0 * (1 - math.exp(-2.0 * z))
    assert psi_prime(mech, X0, z) == pytest.approx(expect_p)


@given(st.floats(0.0, 5.0), st.floats(0.1, 5.0))
def test_monotone_after_drift_removal(z1, z2):
    # z -> psi(x,z) + alpha(x) z is nondecreasing
    mech = make_mechanism("mixed", alpha=-0.4, b=0.6, stable_c=0.3, stable_a=1.6)
    lo, hi = sorted([z1, z2])
    alpha = mech.alpha.at(X0)
    a_lo = psi(mech, X0, lo) + alpha * lo
    a_hi = psi(mech, X0, hi) + alpha * hi
    assert a_hi >= a_lo - 1e-10


@given(st.floats(0.05, 4.0))
def test_convexity_spot(z):
    mech = make_mechanism("mixed", alpha=-0.4, b=0.6, stable_c=0.3, stable_a=1.6)
    d = 0.01
    mid = psi(mech, X0, z + d / 2) + mech.alpha.at(X0) * (z + d / 2)
    avg = 0.5 * (
        psi(mech, X0, z) + mech.alpha.at(X0) * z + psi(mech, X0, z + d) + mech.alpha.at(X0) * (z + d)
    )
    assert mid <= avg + 1e-10


def test_bound_validation():
    mech = quadratic_mechanism(b=1.0)
    mech.validate(np.zeros((3, 1)))
    tight = make_mechanism("quadratic", b=1.0, K=0.5)
    with pytest.raises(MechanismError):
        tight.validate(np.zeros((1, 1)))


def test_stable_bound_uses_kernel_integral():
    # |alpha| + b + int(y^y^2) n(dy) must enter the bound
    mech = make_mechanism("stable", stable_c=1.0, stable_a=1.5, K=1.0)
    with pytest.raises(MechanismError):
        mech.validate(np.zeros((1, 1)))
    make_mechanism("stable", stable_c=1.0, stable_a=1.5, K=10.0).validate(np.zeros((1, 1)))


def test_grey_quadratic():
    finite, est = grey_check(lambda z: z * z, 1.0)
    assert finite and est == pytest.approx(1.0, abs=1e-9)


def test_grey_linear_diverges():
    finite, est = grey_check(lambda z: z, 1.0)
    assert not finite and math.isinf(est)


def test_grey_stable():
    finite, est = grey_check(lambda z: z ** 1.5, 1.0)
    assert finite and est == pytest.approx(2.0, abs=1e-8)


def test_grey_rejects_nonpositive():
    with pytest.raises(MechanismError):
        grey_check(lambda z: -z, 1.0)
