"""Extinction functionals: v(t,x), w(t,x), u_f, and the extinction-time law.

v(t,x) = -log P(unit mass at x is extinct by t) and w = -dv/dt.  For a
spatially constant mechanism v solves the total-mass ODE and is recovered
by inverting the tail integral of 1/psi; the spatially varying case is
marched on a grid by Strang splitting of the mild equation, bootstrapped
from a dominating spatially constant mechanism.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq

from .fields import ScalarField
from .measures import ParticleMeasure
from .mechanism import (
    AtomKernel,
    BranchingMechanism,
    MechanismError,
    StableKernel,
    grey_check,
    psi_prime_vec,
    psi_vec,
)
from .motion import MotionModel


class ExtinctionError(ValueError):
    pass


class GreyConditionError(ExtinctionError):
    """The tail integral of 1/psi diverges: v(t) = infinity."""


# ---------------------------------------------------------------------------
# homogeneous coefficients and closed forms


_REF_POINT = np.zeros((1, 1))


@dataclass(frozen=True)
class _HomogCoeffs:
    q: float  # -alpha >= 0 (subcritical drift rate)
    b: float
    c: float = 0.0
    a: float = 1.5
    atoms: tuple = ()

    def psi(self, z):
        z = np.asarray(z, dtype=float)
        out = self.q * z + self.b * z * z
        if self.c > 0:
            out = out + self.c * z ** self.a
        for y, r in self.atoms:
            out = out + r * (np.exp(-z * y) - 1.0 + z * y)
        return out

    def psi_prime(self, z):
        z = np.asarray(z, dtype=float)
        out = self.q + 2.0 * self.b * z
        if self.c > 0:
            out = out + self.c * self.a * z ** (self.a - 1.0)
        for y, r in self.atoms:
            out = out + r * y * (1.0 - np.exp(-z * y))
        return out

    @property
    def is_trivial(self) -> bool:
        return self.b == 0.0 and self.c == 0.0 and not self.atoms


def homogeneous_coeffs(mech: BranchingMechanism) -> _HomogCoeffs:
    if not mech.is_homogeneous:
        raise ExtinctionError("mechanism is not spatially constant")
    alpha = mech.alpha.constant_value()
    if alpha > 0:
        raise MechanismError("homogeneous solver requires alpha <= 0 (no supercritical drift)")
    b = mech.b.constant_value()
    c, a, atoms = 0.0, 1.5, ()
    if isinstance(mech.kernel, StableKernel):
        c = mech.kernel.strength.constant_value()
        a = mech.kernel.index
    elif isinstance(mech.kernel, AtomKernel):
        atoms = tuple((y, r.constant_value()) for y, r in zip(mech.kernel.masses, mech.kernel.rates))
    return _HomogCoeffs(q=-alpha, b=b, c=c, a=a, atoms=atoms)


def _closed_form_v(co: _HomogCoeffs, t) -> Optional[np.ndarray]:
    """Exact v(t) where a formula exists, else None."""
    t = np.asarray(t, dtype=float)
    if co.atoms:
        return None
    if co.c == 0.0 and co.b > 0.0:
        if co.q == 0.0:
            return 1.0 / (co.b * t)
        return co.q / (co.b * np.expm1(co.q * t))
    if co.b == 0.0 and co.c > 0.0:
        a = co.a
        if co.q == 0.0:
            return (co.c * (a - 1.0) * t) ** (-1.0 / (a - 1.0))
        return ((co.c / co.q) * np.expm1(co.q * (a - 1.0) * t)) ** (-1.0 / (a - 1.0))
    return None


def tail_integral(psi_fn: Callable, v: float) -> float:
    """G(v) = integral of 1/psi from v to infinity."""
    val, _ = quad(lambda z: 1.0 / psi_fn(z), v, np.inf, epsabs=1e-13, epsrel=1e-12, limit=400)
    return val


_GREY_CACHE: dict = {}


def _require_grey(co: _HomogCoeffs) -> None:
    key = (co.q, co.b, co.c, co.a, co.atoms)
    if key not in _GREY_CACHE:
        if co.is_trivial or float(co.psi(1.0)) <= 0.0:
            _GREY_CACHE[key] = False
        else:
            finite, _ = grey_check(lambda z: float(co.psi(z)))
            _GREY_CACHE[key] = finite
    if not _GREY_CACHE[key]:
        raise GreyConditionError("tail integral of 1/psi diverges; extinction exponent is infinite")


def solve_v_homogeneous(mech: BranchingMechanism, t: float) -> float:
    """v(t) for a spatially constant mechanism, by inverting the tail integral.

    Satisfies |G(v(t)) - t| <= 1e-10 with G the tail integral of 1/psi.
    """
    if t <= 0:
        raise ExtinctionError("v is only defined for t > 0")
    co = homogeneous_coeffs(mech)
    _require_grey(co)
    psi_fn = lambda z: float(co.psi(z))

    guess = _closed_form_v(co, t)
    if guess is not None:
        v = float(guess)
    else:
        hi = 1.0
        while tail_integral(psi_fn, hi) > t:
            hi *= 4.0
        lo = hi
        while tail_integral(psi_fn, lo) < t:
            lo /= 4.0
        v = brentq(lambda x: tail_integral(psi_fn, x) - t, lo, hi, xtol=1e-300, rtol=8.9e-16)
    # Newton polish on G(v) = t  (dG/dv = -1/psi(v))
    for _ in range(3):
        err = tail_integral(psi_fn, v) - t
        if abs(err) <= 1e-12:
            break
        v = v + err * psi_fn(v)
    if abs(tail_integral(psi_fn, v) - t) > 1e-10:
        raise ExtinctionError("tail-integral inversion failed to reach tolerance")
    return float(v)


def solve_w_homogeneous(mech: BranchingMechanism, t: float) -> float:
    """w(t) = psi(v(t)) for a spatially constant mechanism."""
    co = homogeneous_coeffs(mech)
    return float(co.psi(solve_v_homogeneous(mech, t)))


class _HomogSolver:
    """Fast exact v/w evaluator for one spatially constant mechanism."""

    def __init__(self, co: _HomogCoeffs):
        _require_grey(co)
        self.co = co
        self._table = None
        if _closed_form_v(co, 1.0) is None:
            self._build_table()

    def _build_table(self):
        # dense inversion of G on a fine log grid (interp error ~ 4e-6 rel,
        # good enough for profile tables; the op-level solver polishes with
        # quadrature and is independent of this table)
        co = self.co
        z = np.geomspace(1e-7, 1e7, 6000)
        nodes, weights = np.polynomial.legendre.leggauss(5)
        mid = 0.5 * (z[1:] + z[:-1])
        half = 0.5 * np.diff(z)
        zz = mid[:, None] + half[:, None] * nodes[None, :]
        seg = (half[:, None] * weights[None, :] / np.asarray(co.psi(zz.reshape(-1))).reshape(zz.shape)).sum(axis=1)
        tail = tail_integral(lambda s: float(co.psi(s)), float(z[-1]))
        g = tail + np.concatenate([np.cumsum(seg[::-1])[::-1], [0.0]])
        self._table = (g[::-1], np.log(z)[::-1])  # g ascending as z descends

    def v(self, t):
        scalar = np.ndim(t) == 0
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        if (t_arr <= 0).any():
            raise ExtinctionError("v is only defined for t > 0")
        cf = _closed_form_v(self.co, t_arr)
        if cf is not None:
            out = np.asarray(cf, dtype=float)
        else:
            g, logz = self._table
            out = np.exp(np.interp(t_arr, g, logz))
        return float(out[0]) if scalar else out

    def w(self, t):
        return self.co.psi(self.v(t))


# ---------------------------------------------------------------------------
# reaction flows (exact-in-z integration of z' = -psi(x, z) at frozen x)


class _ReactionTable:
    """Tabulated antiderivative of 1/psi(x, .) per grid point (mixed kernels)."""

    def __init__(self, mech: BranchingMechanism, pts: np.ndarray, z_cap: float):
        z = np.geomspace(1e-9, max(z_cap * 4.0, 1.0), 3000)
        nodes, weights = np.polynomial.legendre.leggauss(5)
        mid = 0.5 * (z[1:] + z[:-1])
        half = 0.5 * np.diff(z)
        zz = (mid[:, None] + half[:, None] * nodes[None, :]).reshape(-1)
        zz = zz.reshape(-1)
        n = pts.shape[0]
        vals = np.empty((n, zz.size))
        for i in range(n):
            vals[i] = psi_vec(mech, pts[i:i + 1], zz)
        inv = 1.0 / vals.reshape(n, -1, 5)
        seg = (inv * (half[None, :, None] * weights[None, None, :])).sum(axis=2)
        g = np.concatenate([np.zeros((n, 1)), np.cumsum(seg, axis=1)], axis=1)
        # G_i(z) = integral from z to z_top of 1/psi(x_i, .) : decreasing in z
        self.logz = np.log(z)
        self.g = g[:, -1][:, None] - g  # from each z up to the top
        self.z_top = z[-1]

    def flow(self, idx: np.ndarray, z0: np.ndarray, dt: float) -> np.ndarray:
        out = np.zeros_like(z0)
        live = z0 > 0
        for i in np.unique(idx[live]):
            sel = live & (idx == i)
            gi = self.g[i]  # decreasing in z
            g0 = np.interp(np.log(z0[sel]), self.logz, gi)
            logz1 = np.interp(g0 + dt, gi[::-1], self.logz[::-1])
            out[sel] = np.exp(logz1)
        return out


def _riccati_flow(alpha: np.ndarray, b: np.ndarray, z0: np.ndarray, dt: float) -> np.ndarray:
    """Exact flow of z' = alpha z - b z^2 over dt (quadratic mechanisms)."""
    z0 = np.asarray(z0, dtype=float)
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), z0.shape)
    b = np.broadcast_to(np.asarray(b, dtype=float), z0.shape)
    out = np.zeros_like(z0)
    pos = z0 > 0
    crit = pos & (alpha == 0.0)
    out[crit] = z0[crit] / (1.0 + b[crit] * z0[crit] * dt)
    gen = pos & (alpha != 0.0)
    if gen.any():
        e = np.exp(alpha[gen] * dt)
        out[gen] = alpha[gen] * z0[gen] * e / (alpha[gen] + b[gen] * z0[gen] * (e - 1.0))
    return out


def _stable_flow(q: np.ndarray, c: np.ndarray, a: float, z0: np.ndarray, dt: float) -> np.ndarray:
    """Exact flow of z' = -q z - c z^a over dt (Bernoulli substitution)."""
    z0 = np.asarray(z0, dtype=float)
    q = np.broadcast_to(np.asarray(q, dtype=float), z0.shape)
    c = np.broadcast_to(np.asarray(c, dtype=float), z0.shape)
    out = np.zeros_like(z0)
    pos = z0 > 0
    if not pos.any():
        return out
    m0 = z0[pos] ** (1.0 - a)
    qq, cc = q[pos], c[pos]
    grow = np.exp(qq * (a - 1.0) * dt)
    with np.errstate(invalid="ignore", divide="ignore"):
        lin = np.where(qq == 0.0, cc * (a - 1.0) * dt, (cc / np.where(qq == 0.0, 1.0, qq)) * (grow - 1.0))
    m1 = grow * m0 + lin
    out[pos] = m1 ** (-1.0 / (a - 1.0))
    return out


class _ReactionFlow:
    """Dispatcher for the exact frozen-x reaction flow on a fixed point set."""

    def __init__(self, mech: BranchingMechanism, pts: np.ndarray, z_cap: float = 1e4):
        self.mech = mech
        self.pts = pts
        self.alpha = mech.alpha(pts)
        self.b = mech.b(pts)
        self.kind = "quadratic"
        self.table = None
        if isinstance(mech.kernel, StableKernel):
            self.c = mech.kernel.strength(pts)
            self.a = mech.kernel.index
            if (self.b > 0).any() and (self.c > 0).any():
                self.kind = "table"
            else:
                self.kind = "stable" if (self.c > 0).any() else "quadratic"
        elif isinstance(mech.kernel, AtomKernel):
            self.kind = "table"
        if self.kind == "table":
            if (self.alpha > 0).any():
                raise ExtinctionError("tabulated reaction flow requires alpha <= 0")
            self.table = _ReactionTable(mech, pts, z_cap)

    def __call__(self, z: np.ndarray, dt: float) -> np.ndarray:
        if self.kind == "quadratic":
            return _riccati_flow(self.alpha, self.b, z, dt)
        if self.kind == "stable":
            return _stable_flow(-self.alpha, self.c, self.a, z, dt)
        return self.table.flow(np.arange(len(z)), z, dt)


# ---------------------------------------------------------------------------
# spatial grid, transition kernel, mild-equation marching


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform 1-d grid with the time discretisation used by the solvers."""

    x_lo: float
    x_hi: float
    nx: int
    t1: float
    t_max: float
    dt: float

    def __post_init__(self):
        if self.t1 <= 0 or self.dt <= 0 or self.t_max <= self.t1:
            raise ExtinctionError("grid requires 0 < t1 < t_max and dt > 0")

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_lo, self.x_hi, self.nx)[:, None]

    @property
    def tgrid(self) -> np.ndarray:
        n = int(round((self.t_max - self.t1) / self.dt))
        return self.t1 + self.dt * np.arange(n + 1)


def transition_kernel(motion: MotionModel, x: np.ndarray, dt: float) -> np.ndarray:
    """One-step transition matrix on the 1-d grid (rows: start points).

    Conservative kinds are row-normalised so constants are fixed points;
    heavy-tail mass beyond the grid is assigned to the edge nodes (the
    fields of interest are asymptotically constant).  The killed kind
    keeps the deficit as killed mass.
    """
    if x.shape[1] != 1:
        raise ExtinctionError("grid profile solver supports d=1 only")
    xi = x[:, 0]
    diff = xi[None, :] - xi[:, None]
    if motion.kind in ("brownian", "killed_box"):
        s2 = motion.sigma ** 2 * dt
        k = np.exp(-diff * diff / (2.0 * s2))
    elif motion.kind == "drift_diffusion":
        s2 = motion.sigma ** 2 * dt
        shift = motion.drift(x)[:, None] * dt
        k = np.exp(-((diff - shift) ** 2) / (2.0 * s2))
    elif motion.kind == "subordinate_bm":
        if motion.subordinator_index != 0.5:
            raise ExtinctionError("grid profile solver supports subordinate_bm only at index 0.5")
        k = dt / (dt * dt + diff * diff)  # Cauchy(dt) up to normalisation
    else:
        raise ExtinctionError(f"no grid kernel for motion kind {motion.kind}")
    if motion.kind == "killed_box":
        inside = (xi >= motion.box_lo) & (xi <= motion.box_hi)
        k = k * inside[None, :]
        k = k / k.sum(axis=1, keepdims=True).clip(min=1e-300)
        # mass stepping outside the box over dt is killed at the endpoint check
        from scipy.stats import norm

        stay = norm.cdf((motion.box_hi - xi) / math.sqrt(motion.sigma ** 2 * dt)) - norm.cdf(
            (motion.box_lo - xi) / math.sqrt(motion.sigma ** 2 * dt)
        )
        k = k * stay[:, None]
        k[~inside] = 0.0
    else:
        k = k / k.sum(axis=1, keepdims=True)
    return k


class GridSolver:
    """Strang-split marching of the mild equation on a 1-d grid.

    Per step of dt: exact reaction flow for dt/2 at frozen locations, one
    transition-kernel application, exact reaction flow for dt/2 again.
    """

    def __init__(self, mech: BranchingMechanism, motion: MotionModel, grid: SpatialGrid,
                 dt: Optional[float] = None, z_cap: float = 1e4):
        self.mech = mech
        self.motion = motion
        self.grid = grid
        self.dt = grid.dt if dt is None else dt
        self.x = grid.x
        self.kernel = transition_kernel(motion, self.x, self.dt)
        self.reaction = _ReactionFlow(mech, self.x, z_cap=z_cap)

    def step(self, u: np.ndarray) -> np.ndarray:
        u = self.reaction(u, 0.5 * self.dt)
        u = self.kernel @ u
        return self.reaction(u, 0.5 * self.dt)

    def march(self, u0: np.ndarray, duration: float) -> np.ndarray:
        n = int(round(duration / self.dt))
        if abs(n * self.dt - duration) > 1e-9:
            raise ExtinctionError(f"duration {duration} is not a multiple of dt {self.dt}")
        u = np.asarray(u0, dtype=float).copy()
        for _ in range(n):
            u = self.step(u)
        return u


def solve_u_f(mech: BranchingMechanism, motion: MotionModel, f, t: float,
              grid: SpatialGrid, dt: Optional[float] = None) -> np.ndarray:
    """Mild solution u_f(t, .) on the grid: -log E exp(-<f, X_t>) per unit mass.

    f may be a ScalarField or an array of nonnegative values on grid.x.
    If a step produces negative values the step size is halved and the
    march restarted, up to 10 times.
    """
    x = grid.x
    u0 = f(x) if callable(f) else np.asarray(f, dtype=float)
    if (u0 < 0).any():
        raise ExtinctionError("solve_u_f requires nonnegative terminal data")
    step_dt = grid.dt if dt is None else dt
    if abs(round(t / step_dt) * step_dt - t) > 1e-9:
        raise ExtinctionError(f"t={t} is not a multiple of the step dt={step_dt}")
    for _ in range(10):
        solver = GridSolver(mech, motion, grid, dt=step_dt, z_cap=max(float(u0.max()) * 4.0, 1e2))
        u = solver.march(u0, t)
        if (u >= 0).all():
            return u
        step_dt *= 0.5
    raise ExtinctionError("solve_u_f failed to keep positivity after 10 step halvings")


# ---------------------------------------------------------------------------
# extinction profiles


@dataclass
class ExtinctionProfile:
    """Tabulated or closed-form v(t,x), w(t,x) with interpolation accessors."""

    mode: str  # closed_form | grid
    tgrid: np.ndarray
    xgrid: np.ndarray  # (nx, d)
    v_tab: np.ndarray  # (nt, nx)
    w_tab: np.ndarray
    mech_fingerprint: str = ""
    motion_fingerprint: str = ""
    homog: Optional[_HomogSolver] = field(default=None, repr=False)

    def _interp_t(self, table: np.ndarray, t: float) -> np.ndarray:
        tg = self.tgrid
        if t < tg[0] - 1e-12 or t > tg[-1] + 1e-12:
            # log-linear extrapolation from the nearest edge pair
            i0, i1 = (0, 1) if t < tg[0] else (-2, -1)
            lt = np.log(table[i0].clip(min=1e-300))
            ht = np.log(table[i1].clip(min=1e-300))
            slope = (ht - lt) / (tg[i1] - tg[i0])
            return np.exp(lt + slope * (t - tg[i0]))
        idx = np.clip(np.searchsorted(tg, t) - 1, 0, len(tg) - 2)
        t0, t1 = tg[idx], tg[idx + 1]
        lam = 0.0 if t1 == t0 else (t - t0) / (t1 - t0)
        lo = np.log(table[idx].clip(min=1e-300))
        hi = np.log(table[idx + 1].clip(min=1e-300))
        return np.exp((1 - lam) * lo + lam * hi)

    def _eval(self, table, homog_fn, t: float, pts, extrapolate: bool) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if self.mode == "closed_form":
            if t <= 0:
                raise ExtinctionError("extinction functionals need t > 0")
            return np.full(pts.shape[0], float(homog_fn(t)))
        if t < self.tgrid[0] - 1e-12 and not extrapolate:
            raise ExtinctionError(f"t={t} below the profile grid start {self.tgrid[0]}")
        row = self._interp_t(table, t)
        xg = self.xgrid[:, 0]
        q = np.clip(pts[:, 0], xg[0], xg[-1])
        return np.interp(q, xg, row)

    def v_at(self, t: float, pts, extrapolate: bool = False) -> np.ndarray:
        return self._eval(self.v_tab, self.homog.v if self.homog else None, t, pts, extrapolate)

    def w_at(self, t: float, pts, extrapolate: bool = False) -> np.ndarray:
        return self._eval(self.w_tab, self.homog.w if self.homog else None, t, pts, extrapolate)

    @property
    def t_min(self) -> float:
        return float(self.tgrid[0])

    @property
    def t_max(self) -> float:
        return float(self.tgrid[-1])

    @property
    def is_homogeneous(self) -> bool:
        return self.mode == "closed_form"


def homogeneous_profile(mech: BranchingMechanism, grid: SpatialGrid,
                        mech_fp: str = "", motion_fp: str = "") -> ExtinctionProfile:
    solver = _HomogSolver(homogeneous_coeffs(mech))
    tg = grid.tgrid
    v = np.asarray(solver.v(tg))[:, None] * np.ones((1, grid.nx))
    w = np.asarray(solver.w(tg))[:, None] * np.ones((1, grid.nx))
    return ExtinctionProfile(
        mode="closed_form", tgrid=tg, xgrid=grid.x, v_tab=v, w_tab=w,
        mech_fingerprint=mech_fp, motion_fingerprint=motion_fp, homog=solver,
    )


def dominating_homogeneous(mech: BranchingMechanism, pts: np.ndarray) -> _HomogCoeffs:
    """Spatially constant lower bound psi_tilde <= psi(x, .) on the grid."""
    alpha_hi = float(mech.alpha(pts).max())
    if alpha_hi > 1e-12:
        raise ExtinctionError(
            "domination bound needs alpha(x) <= 0 everywhere on the grid (got max %.3g)" % alpha_hi
        )
    b_min = float(mech.b(pts).min())
    c_min, a = 0.0, 1.5
    atoms = ()
    if isinstance(mech.kernel, StableKernel):
        c_min = float(mech.kernel.strength(pts).min())
        a = mech.kernel.index
    elif isinstance(mech.kernel, AtomKernel):
        atoms = tuple((y, float(r(pts).min())) for y, r in zip(mech.kernel.masses, mech.kernel.rates))
    co = _HomogCoeffs(q=0.0, b=b_min, c=c_min, a=a, atoms=atoms)
    _require_grey(co)
    return co


def solve_vw_spatial(mech: BranchingMechanism, motion: MotionModel, grid: SpatialGrid,
                     mech_fp: str = "", motion_fp: str = "",
                     dt: Optional[float] = None) -> ExtinctionProfile:
    """Grid-mode extinction profile.

    v carries the singular layer of the dominating spatially constant
    bound: the march starts at an internal time well below t1 from that
    bound (whose influence on v decays linearly in elapsed time) and is
    capped below the bound at every grid time.  w is the centred time
    difference of the marched v (one-sided second order at the ends),
    which keeps (v, w) internally consistent so the weight martingales
    built from them have mean one up to discretisation; the Feynman-Kac
    one-step form, always evaluated from difference-quotient values, is
    the pointwise tie-breaker where the two disagree by more than 5
    percent.
    """
    co_tilde = dominating_homogeneous(mech, grid.x)
    tilde = _HomogSolver(co_tilde)
    tg = grid.tgrid
    step_dt = grid.dt if dt is None else dt
    # singular layer: start at dt/4 from the bound and substep up to t1
    t_start = step_dt / 4.0
    solver = GridSolver(mech, motion, grid, dt=step_dt, z_cap=float(tilde.v(t_start)) * 4.0)
    fine = GridSolver(mech, motion, grid, dt=t_start, z_cap=float(tilde.v(t_start)) * 4.0)
    substeps = int(round(grid.dt / step_dt))
    if abs(substeps * step_dt - grid.dt) > 1e-12:
        raise ExtinctionError("profile dt must divide the grid dt")

    nt, nx = len(tg), grid.nx
    u = np.full(nx, float(tilde.v(t_start)))
    n_fine = int(round((tg[0] - t_start) / t_start))
    for j in range(n_fine):
        u = fine.step(u)
        u = np.minimum(u, float(tilde.v(t_start * (2 + j))))
    v = np.empty((nt, nx))
    v[0] = np.minimum(u, float(tilde.v(tg[0])))
    for k in range(nt - 1):
        u = v[k]
        for _ in range(substeps):
            u = solver.step(u)
        cap = float(tilde.v(tg[k + 1]))
        u = np.minimum(u, cap)
        if (u > v[k] * (1.0 + 1e-9) + 1e-12).any():
            raise ExtinctionError(f"v became non-monotone in t at grid time {tg[k + 1]:.4f}")
        v[k + 1] = u

    w = np.empty_like(v)
    w[1:-1] = (v[:-2] - v[2:]) / (2.0 * grid.dt)
    w[0] = (3.0 * v[0] - 4.0 * v[1] + v[2]) / (2.0 * grid.dt)
    w[-1] = (v[-3] - 4.0 * v[-2] + 3.0 * v[-1]) / (-2.0 * grid.dt)
    fd = w.copy()
    for k in range(1, nt):
        fk = _fk_step(solver, v[k - 1], v[k], fd[k - 1], grid.dt)
        mask = np.abs(fd[k] - fk) > 0.05 * np.abs(fk)
        if mask.any():
            w[k] = np.where(mask, fk, w[k])
    w = w.clip(min=0.0)

    return ExtinctionProfile(
        mode="grid", tgrid=tg, xgrid=grid.x, v_tab=v, w_tab=w,
        mech_fingerprint=mech_fp, motion_fingerprint=motion_fp,
    )


def _fk_step(solver: GridSolver, v_prev: np.ndarray, v_next: np.ndarray,
             w_prev: np.ndarray, dt: float) -> np.ndarray:
    """One deterministic Feynman-Kac kernel step for w (trapezoid exponent)."""
    pts = solver.x
    inner = w_prev * np.exp(-0.5 * dt * psi_prime_vec(solver.mech, pts, v_prev))
    out = solver.kernel @ inner
    return out * np.exp(-0.5 * dt * psi_prime_vec(solver.mech, pts, v_next))


def build_profile(mech: BranchingMechanism, motion: MotionModel, grid: SpatialGrid,
                  mech_fp: str = "", motion_fp: str = "") -> ExtinctionProfile:
    if mech.is_homogeneous:
        return homogeneous_profile(mech, grid, mech_fp, motion_fp)
    return solve_vw_spatial(mech, motion, grid, mech_fp, motion_fp)


# ---------------------------------------------------------------------------
# extinction-time law


def extinction_cdf(profile: ExtinctionProfile, mu: ParticleMeasure, t: float,
                   extrapolate: bool = False) -> float:
    """P(extinct by t) = exp(-<v_t, mu>)."""
    if mu.is_zero:
        return 1.0
    if t <= 0:
        raise ExtinctionError("extinction_cdf needs t > 0")
    v = profile.v_at(t, mu.locations, extrapolate=extrapolate)
    return float(math.exp(-float(np.dot(mu.masses, v))))


def sample_extinction_time(profile: ExtinctionProfile, mu: ParticleMeasure, rng,
                           u: Optional[float] = None) -> tuple:
    """Inverse-CDF draw of the extinction time; returns (h, u)."""
    if mu.is_zero:
        raise ExtinctionError("cannot sample the extinction time of the zero measure")
    if u is None:
        u = float(rng.random())
        while u <= 0.0:
            u = float(rng.random())
    lo, hi = 1e-6, 1.0
    while extinction_cdf(profile, mu, hi, extrapolate=True) < u:
        hi *= 2.0
        if hi > 1e12:
            raise ExtinctionError("extinction-time inversion ran away (is the law proper?)")
    while extinction_cdf(profile, mu, lo, extrapolate=True) > u:
        lo /= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if extinction_cdf(profile, mu, mid, extrapolate=True) < u:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-13 * max(1.0, hi):
            break
    return 0.5 * (lo + hi), u


# ---------------------------------------------------------------------------
# serialization


PROFILE_HEADER = "willdec profile v1"


def profile_to_text(profile: ExtinctionProfile) -> str:
    lines = [PROFILE_HEADER]
    lines.append(f"mode {profile.mode}")
    lines.append(f"mechanism {profile.mech_fingerprint or '-'}")
    lines.append(f"motion {profile.motion_fingerprint or '-'}")
    lines.append(f"dim {profile.xgrid.shape[1]}")
    lines.append("tgrid " + " ".join(repr(float(t)) for t in profile.tgrid))
    lines.append("xgrid " + " ".join(repr(float(c)) for c in profile.xgrid.reshape(-1)))
    lines.append("v")
    for row in profile.v_tab:
        lines.append(" ".join(repr(float(x)) for x in row))
    lines.append("w")
    for row in profile.w_tab:
        lines.append(" ".join(repr(float(x)) for x in row))
    lines.append("end")
    return "\n".join(lines) + "\n"


def profile_from_text(text: str) -> ExtinctionProfile:
    lines = text.strip().split("\n")
    if lines[0] != PROFILE_HEADER:
        raise ExtinctionError(f"unrecognised profile header {lines[0]!r}")
    mode = lines[1].split()[1]
    mech_fp = lines[2].split()[1]
    motion_fp = lines[3].split()[1]
    d = int(lines[4].split()[1])
    tg = np.array([float(s) for s in lines[5].split()[1:]])
    xflat = np.array([float(s) for s in lines[6].split()[1:]])
    xg = xflat.reshape(-1, d)
    assert lines[7] == "v"
    nt = len(tg)
    v = np.array([[float(s) for s in lines[8 + i].split()] for i in range(nt)])
    assert lines[8 + nt] == "w"
    w = np.array([[float(s) for s in lines[9 + nt + i].split()] for i in range(nt)])
    del mode  # reloaded profiles are table-backed regardless of build mode
    return ExtinctionProfile(
        mode="grid", tgrid=tg, xgrid=xg, v_tab=v, w_tab=w,
        mech_fingerprint=mech_fp if mech_fp != "-" else "",
        motion_fingerprint=motion_fp if motion_fp != "-" else "",
    )


def fingerprint(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]
