import numpy as np
import pytest
from hypothesis import given, strategies as st

from willdec.fields import FieldSyntaxError, parse_field


def test_constant():
    f = parse_field("1.5")
    assert f.at([0.3]) == 1.5
    assert f.is_constant and f.constant_value() == 1.5


def test_gauss_and_alias():
    f = parse_field("gauss")
    g = parse_field("exp(-|x|^2)")
    pts = np.array([[0.0], [1.0], [-2.0]])
    expect = np.exp(-pts[:, 0] ** 2)
    assert np.allclose(f(pts), expect)
    assert np.allclose(g(pts), expect)


def test_sum_product_clamp_x1():
    f = parse_field("0.75 + 0.5*exp(-|x|^2)")
    assert f.at([0.0]) == pytest.approx(1.25)
    assert f.bounds() == (0.75, 1.25)
    g = parse_field("1 + 0.25*clamp(x1, -1, 1)")
    assert g.at([5.0]) == pytest.approx(1.25)
    assert g.at([-5.0]) == pytest.approx(0.75)
    assert g.at([0.2]) == pytest.approx(1.05)
    assert g.bounds() == (0.75, 1.25)


def test_parens_and_nested():
    f = parse_field("2*(1 + gauss)")
    assert f.at([0.0]) == pytest.approx(4.0)
    assert f.bounds() == (2.0, 4.0)


def test_gauss_affine_decomposition():
    assert parse_field("0.5 + 2*gauss").gauss_affine() == (0.5, 2.0)
    assert parse_field("gauss*gauss").gauss_affine() is None
    assert parse_field("clamp(x1,0,1)").gauss_affine() is None


def test_cemetery_evaluates_to_zero():
    f = parse_field("1 + gauss")
    pts = np.array([[0.5], [np.nan]])
    vals = f(pts)
    assert vals[1] == 0.0


@pytest.mark.parametrize("bad", ["sin(x1)", "x2", "1 +", "clamp(1, 2)", "exp(-x)", "1 / 2"])
def test_rejects_off_grammar(bad):
    with pytest.raises(FieldSyntaxError):
        parse_field(bad)


@given(st.floats(-3, 3), st.floats(0.1, 2), st.floats(-2, 2))
def test_affine_evaluation_matches_numpy(a, b, x):
    f = parse_field(f"{a!r} + {b!r}*gauss")
    assert f.at([x]) == pytest.approx(a + b * np.exp(-x * x), rel=1e-12, abs=1e-12)


@given(st.lists(st.floats(-4, 4), min_size=1, max_size=5))
def test_bounds_contain_samples(xs):
    f = parse_field("0.2 + 0.3*clamp(x1, -1, 1) + gauss*0.1")
    lo, hi = f.bounds()
    vals = f(np.array(xs)[:, None])
    assert (vals >= lo - 1e-12).all() and (vals <= hi + 1e-12).all()
