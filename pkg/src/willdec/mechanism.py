"""Branching mechanisms and admissibility checks.

A mechanism is psi(x, z) = -alpha(x) z + b(x) z^2 + integral over (0, inf)
of (exp(-z y) - 1 + z y) n(x, dy), with bounded coefficient fields and a
jump kernel n that is either absent, a stable kernel, or a finite list of
atoms.  The stable kernel is normalised so that the pure-stable mechanism
is exactly c(x) z^a:

    n(x, dy) = c(x) * a (a-1) / Gamma(2-a) * y^(-1-a) dy,   a in (1, 2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.integrate import quad
from scipy.special import gamma as gamma_fn

from .fields import ScalarField, constant_field, parse_field


class MechanismError(ValueError):
    pass


def _as_points(x) -> np.ndarray:
    pts = np.asarray(x, dtype=float)
    if pts.ndim == 1:
        pts = pts[None, :]
    return pts


@dataclass(frozen=True)
class StableKernel:
    """Stable jump kernel with index a in (1, 2) and strength field c."""

    index: float
    strength: ScalarField

    def __post_init__(self):
        if not 1.0 < self.index < 2.0:
            raise MechanismError(f"stable index must lie in (1, 2), got {self.index}")

    @property
    def norm_const(self) -> float:
        a = self.index
        return a * (a - 1.0) / gamma_fn(2.0 - a)

    def density(self, y: np.ndarray, c: float = 1.0) -> np.ndarray:
        return c * self.norm_const * y ** (-1.0 - self.index)

    def phi(self, z, pts) -> np.ndarray:
        return self.strength(pts) * np.asarray(z, dtype=float) ** self.index

    def phi_prime(self, z, pts) -> np.ndarray:
        return self.strength(pts) * self.index * np.asarray(z, dtype=float) ** (self.index - 1.0)

    def y_wedge_y2(self, pts) -> np.ndarray:
        a = self.index
        return self.strength(pts) * self.norm_const * (1.0 / (2.0 - a) + 1.0 / (a - 1.0))

    def window_rate(self, za, zb, pts) -> np.ndarray:
        """integral of y (exp(-za y) - exp(-zb y)) n(x, dy), za <= zb."""
        a = self.index
        za = np.asarray(za, dtype=float)
        zb = np.asarray(zb, dtype=float)
        return self.strength(pts) * a * (zb ** (a - 1.0) - za ** (a - 1.0))

    def sample_window_mass(self, za: float, zb: float, c: float, n: int, rng) -> np.ndarray:
        """Draw masses with density prop. to y (exp(-za y)-exp(-zb y)) n(dy).

        Inverse CDF on a log-y grid; the strength c cancels in the
        normalisation but keeps the signature uniform.
        """
        del c
        a = self.index
        # support concentrated around 1/zb .. 1/za; pad generously
        lo = 1e-4 / zb
        hi = 50.0 / max(za, 1e-12)
        grid = np.geomspace(lo, hi, 600)
        dens = grid ** (-a) * (np.exp(-za * grid) - np.exp(-zb * grid))
        dens = np.clip(dens, 0.0, None)
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))])
        if cdf[-1] <= 0.0:
            raise MechanismError("jump-mass window has zero mass")
        cdf /= cdf[-1]
        u = rng.random(n)
        return np.interp(u, cdf, grid)


@dataclass(frozen=True)
class AtomKernel:
    """Finite jump kernel: atoms at masses y_i with rate fields r_i."""

    masses: tuple
    rates: tuple

    def __post_init__(self):
        if len(self.masses) != len(self.rates) or not self.masses:
            raise MechanismError("atom kernel needs matching nonempty masses and rates")
        if any(y <= 0 for y in self.masses):
            raise MechanismError("atom masses must be positive")

    def phi(self, z, pts) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        out = 0.0
        for y, r in zip(self.masses, self.rates):
            out = out + r(pts) * (np.exp(-z * y) - 1.0 + z * y)
        return out

    def phi_prime(self, z, pts) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        out = 0.0
        for y, r in zip(self.masses, self.rates):
            out = out + r(pts) * y * (1.0 - np.exp(-z * y))
        return out

    def y_wedge_y2(self, pts) -> np.ndarray:
        out = 0.0
        for y, r in zip(self.masses, self.rates):
            out = out + r(pts) * min(y, y * y)
        return out

    def window_rate(self, za, zb, pts) -> np.ndarray:
        za = np.asarray(za, dtype=float)
        zb = np.asarray(zb, dtype=float)
        out = 0.0
        for y, r in zip(self.masses, self.rates):
            out = out + r(pts) * y * (np.exp(-za * y) - np.exp(-zb * y))
        return out

    def sample_window_mass(self, za: float, zb: float, rates_at_x: Sequence[float], n: int, rng) -> np.ndarray:
        w = np.array(
            [r * y * (math.exp(-za * y) - math.exp(-zb * y)) for y, r in zip(self.masses, rates_at_x)]
        )
        if w.sum() <= 0:
            raise MechanismError("jump-mass window has zero mass")
        idx = rng.choice(len(self.masses), size=n, p=w / w.sum())
        return np.asarray(self.masses, dtype=float)[idx]


@dataclass(frozen=True)
class BranchingMechanism:
    alpha: ScalarField
    b: ScalarField
    kernel: Optional[object] = None  # StableKernel | AtomKernel | None
    K: float = 10.0
    _jump_quad_cache: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def has_jumps(self) -> bool:
        return self.kernel is not None

    @property
    def is_homogeneous(self) -> bool:
        if not (self.alpha.is_constant and self.b.is_constant):
            return False
        if isinstance(self.kernel, StableKernel):
            return self.kernel.strength.is_constant
        if isinstance(self.kernel, AtomKernel):
            return all(r.is_constant for r in self.kernel.rates)
        return True

    def jump_phi(self, z, pts):
        return self.kernel.phi(z, pts) if self.kernel is not None else 0.0

    def jump_phi_prime(self, z, pts):
        return self.kernel.phi_prime(z, pts) if self.kernel is not None else 0.0

    def validate(self, pts) -> None:
        """Check the uniform bound and positivity constraints on a grid."""
        pts = _as_points(pts)
        b_vals = self.b(pts)
        if (b_vals < 0).any():
            raise MechanismError("b(x) must be nonnegative")
        total = np.abs(self.alpha(pts)) + b_vals
        if self.kernel is not None:
            total = total + self.kernel.y_wedge_y2(pts)
        worst = float(total.max())
        if worst > self.K + 1e-12:
            raise MechanismError(
                f"mechanism bound violated: |alpha|+b+int(y^y^2) reaches {worst:.6g} > K={self.K:.6g}"
            )


def psi_vec(mech: BranchingMechanism, pts: np.ndarray, z) -> np.ndarray:
    """psi(x, z) vectorised over points (and broadcast z)."""
    z = np.asarray(z, dtype=float)
    return -mech.alpha(pts) * z + mech.b(pts) * z * z + mech.jump_phi(z, pts)


def psi_prime_vec(mech: BranchingMechanism, pts: np.ndarray, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    return -mech.alpha(pts) + 2.0 * mech.b(pts) * z + mech.jump_phi_prime(z, pts)


def psi(mech: BranchingMechanism, x, z: float) -> float:
    """Branching mechanism value at a single point and z >= 0."""
    if z < 0:
        raise MechanismError(f"psi requires z >= 0, got {z}")
    if z == 0.0:
        return 0.0
    return float(psi_vec(mech, _as_points(x), z)[0])


def psi_prime(mech: BranchingMechanism, x, z: float) -> float:
    """d psi / d z at a single point and z >= 0."""
    if z < 0:
        raise MechanismError(f"psi_prime requires z >= 0, got {z}")
    return float(psi_prime_vec(mech, _as_points(x), z)[0])


def jump_integral_quadrature(mech: BranchingMechanism, x, z: float, tol: float = 1e-10) -> float:
    """Adaptive quadrature of the jump part (oracle for the closed forms)."""
    if mech.kernel is None:
        return 0.0
    if isinstance(mech.kernel, AtomKernel):
        return float(mech.kernel.phi(z, _as_points(x))[0])
    c = mech.kernel.strength.at(x)
    a = mech.kernel.index

    def integrand(y):
        return (math.exp(-z * y) - 1.0 + z * y) * mech.kernel.density(y, c)

    # split at the crossover scale 1/z; the integrand is ~ z^2 y^(1-a)/2
    # near zero and ~ z y^(-a) at infinity, both integrable
    mid = 1.0 / max(z, 1e-12)
    val1, _ = quad(integrand, 0.0, mid, epsabs=tol, epsrel=tol, limit=200)
    val2, _ = quad(integrand, mid, np.inf, epsabs=tol, epsrel=tol, limit=200)
    return val1 + val2


def grey_check(psi_tilde, z_start: float = 1.0, tail_tol: float = 1e-10, max_doublings: int = 200):
    """Estimate the tail integral of 1/psi_tilde from z_start.

    Returns (finite, estimate).  The integral is accumulated over dyadic
    segments [z 2^k, z 2^(k+1)]; convergence is declared when a segment
    contributes less than ``tail_tol``, divergence when the segment
    contributions have stopped decaying over 8 doublings.  The divergence
    call is a heuristic, not a proof.
    """
    probes = z_start * np.array([1.0, 2.0, 8.0, 64.0, 1024.0])
    vals = np.array([psi_tilde(float(p)) for p in probes])
    if (vals <= 0).any():
        raise MechanismError("grey_check requires psi_tilde(z) > 0 from z_start on")

    total = 0.0
    increments = []
    lo = z_start
    for k in range(max_doublings):
        hi = lo * 2.0
        inc, _ = quad(lambda z: 1.0 / psi_tilde(z), lo, hi, epsabs=1e-14, epsrel=1e-12, limit=200)
        total += inc
        increments.append(inc)
        if inc < tail_tol:
            return True, total
        if k >= 8 and increments[-1] > 0.5 * increments[-9]:
            return False, math.inf
        lo = hi
    return False, math.inf


def make_mechanism(kind: str, *, alpha=0.0, b=0.0, stable_c=0.0, stable_a=1.5,
                   atoms=None, K: float = 10.0) -> BranchingMechanism:
    """Construct a mechanism from config-level values.

    kind: quadratic | quadratic_spatial | stable | mixed | atoms
    Field arguments accept numbers or whitelisted expressions.
    """
    alpha_f = parse_field(alpha)
    b_f = parse_field(b)
    kernel = None
    if kind in ("stable", "mixed"):
        c_f = parse_field(stable_c)
        lo, _ = c_f.bounds()
        if lo < 0:
            raise MechanismError("stable strength must be nonnegative")
        kernel = StableKernel(index=float(stable_a), strength=c_f)
    elif kind == "atoms":
        if not atoms:
            raise MechanismError("atom kernel requires atoms=[(y, rate), ...]")
        kernel = AtomKernel(
            masses=tuple(float(y) for y, _ in atoms),
            rates=tuple(parse_field(r) for _, r in atoms),
        )
    elif kind not in ("quadratic", "quadratic_spatial"):
        raise MechanismError(f"unknown mechanism kind {kind!r}")
    if kind == "quadratic" and not (alpha_f.is_constant and b_f.is_constant):
        raise MechanismError("kind=quadratic requires constant coefficients; use quadratic_spatial")
    if kind == "stable":
        if not (alpha_f.is_constant and b_f.is_constant):
            raise MechanismError("kind=stable requires constant alpha and b")
        if b_f.constant_value() != 0.0:
            raise MechanismError("kind=stable has b=0; use mixed for b>0 with jumps")
    return BranchingMechanism(alpha=alpha_f, b=b_f, kernel=kernel, K=float(K))


def quadratic_mechanism(b: float = 1.0, alpha: float = 0.0, K: float = 10.0) -> BranchingMechanism:
    return make_mechanism("quadratic", alpha=alpha, b=b, K=K)


def stable_mechanism(c: float = 1.0, a: float = 1.5, K: float = 10.0) -> BranchingMechanism:
    return make_mechanism("stable", stable_c=c, stable_a=a, K=K)
