"""Tilted single-site measures.

For a density ``rho`` the tilted density is

    h(x) = exp(-V(x + rho) - lam * x) / Z,

with the chemical potential ``lam`` fixed by ``int x h(x) dx = 0``.  The
coordinate ``x`` is the centred spin ``eta - rho``; everything here lives
in that coordinate.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import integrate, optimize

from .potential import PotentialSpec

logger = logging.getLogger(__name__)

# log(1e16): the integrand at the grid boundary is at most 1e-16 x peak
BOUNDARY_DROP = 36.85


@dataclass(frozen=True)
class QuadratureGrid:
    """Uniform grid with trapezoidal weights."""

    center: float
    halfwidth: float
    points: int

    def __post_init__(self):
        if self.points < 2:
            raise ValueError("a quadrature grid needs at least two points")
        if self.halfwidth <= 0:
            raise ValueError("halfwidth must be positive")

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.center - self.halfwidth, self.center + self.halfwidth, self.points)

    @property
    def spacing(self) -> float:
        return 2.0 * self.halfwidth / (self.points - 1)

    @property
    def weights(self) -> np.ndarray:
        w = np.full(self.points, self.spacing)
        w[0] = w[-1] = 0.5 * self.spacing
        return w


@dataclass(frozen=True)
class DensityGrid:
    """Node values of a density on a uniform grid (weights are trapezoidal)."""

    nodes: np.ndarray
    values: np.ndarray

    @property
    def spacing(self) -> float:
        return float(self.nodes[1] - self.nodes[0])

    @property
    def weights(self) -> np.ndarray:
        w = np.full(self.nodes.size, self.spacing)
        w[0] = w[-1] = 0.5 * self.spacing
        return w

    def mass(self) -> float:
        return float(np.dot(self.weights, self.values))

    def mean(self) -> float:
        return float(np.dot(self.weights, self.values * self.nodes) / self.mass())

    def variance(self) -> float:
        m = self.mean()
        return float(np.dot(self.weights, self.values * (self.nodes - m) ** 2) / self.mass())


@dataclass(frozen=True)
class TiltedMeasure:
    """The tilted density ``h`` for one value of ``rho``.

    ``values`` are normalised so that the trapezoidal sum over ``grid`` is one.
    ``moments[k - 1]`` holds ``m_k`` for ``k = 1..len(moments)``.
    """

    pot: PotentialSpec
    rho: float
    lam: float
    log_z: float
    sigma2: float
    moments: np.ndarray
    grid: QuadratureGrid
    values: np.ndarray
    tail_mass: float = 0.0

    @property
    def z(self) -> float:
        return math.exp(self.log_z) if self.log_z < 700 else math.inf

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma2)

    @property
    def m3(self) -> float:
        return float(self.moments[2])

    @property
    def m4(self) -> float:
        return float(self.moments[3])

    @property
    def support(self) -> tuple:
        """Interval outside of which ``h`` is below ``1e-16`` of its peak."""
        g = self.grid
        return g.center - g.halfwidth, g.center + g.halfwidth

    def log_density(self, x):
        x = np.asarray(x, dtype=float)
        return -self.pot.eval(x + self.rho) - self.lam * x - self.log_z

    def density(self, x):
        return np.exp(self.log_density(x))

    def xi(self, eta):
        """Centred coordinate ``eta - rho``."""
        return np.asarray(eta, dtype=float) - self.rho


# -- grid construction ----------------------------------------------------


def _tilted_energy(pot, rho, lam):
    return lambda x: pot.eval(x + rho) + lam * x


def _find_mode(pot, rho, lam, x0=0.0, maxiter=200):
    """Damped Newton on ``V'(x + rho) + lam``; falls back on a bounded search."""
    energy = _tilted_energy(pot, rho, lam)
    curv_floor = max(pot.delta - pot.psi_d2_sup, 1e-3)
    x = x0
    for _ in range(maxiter):
        g = pot.eval(x + rho, 1) + lam
        step = -g / max(pot.eval(x + rho, 2), curv_floor)
        e0 = energy(x)
        t = 1.0
        while t > 1e-12 and energy(x + t * step) > e0:
            t *= 0.5
        x += t * step
        if abs(t * step) < 1e-13 * (1.0 + abs(x)):
            break
    return x


def _boundary_distance(energy, mode, direction, threshold):
    u0 = energy(mode)
    t = 1e-3
    while energy(mode + direction * t) - u0 < threshold:
        t *= 2.0
        if t > 1e12:
            raise RuntimeError("tilted density does not decay; is the tilt too large?")
    f = lambda s: energy(mode + direction * s) - u0 - threshold
    return optimize.brentq(f, 0.5 * t if t > 1e-3 else 0.0, t, xtol=1e-10)


def tilted_grid(pot: PotentialSpec, rho: float, lam: float, points: int) -> QuadratureGrid:
    """Grid centred at the mode of the tilted density, cut where it drops by ``1e-16``."""
    mode = _find_mode(pot, rho, lam)
    energy = _tilted_energy(pot, rho, lam)
    thr = BOUNDARY_DROP + 2.0 * pot.psi_sup
    hw = max(_boundary_distance(energy, mode, +1, thr), _boundary_distance(energy, mode, -1, thr))
    return QuadratureGrid(mode, hw, points)


def _weighted(pot, rho, lam, grid):
    x = grid.nodes
    u = pot.eval(x + rho) + lam * x
    umin = float(np.min(u))
    w = grid.weights * np.exp(-(u - umin))
    return x, w, umin


def _mean_at(pot, rho, lam, points):
    grid = tilted_grid(pot, rho, lam, points)
    x, w, _ = _weighted(pot, rho, lam, grid)
    return float(np.dot(w, x) / w.sum())


def _solve_lambda(pot, rho, points, tol, lam_range):
    v1 = pot.eval(rho, 1)
    slack = pot.psi_d1_sup + 10.0
    lo, hi = -v1 - slack, -v1 + slack
    f = lambda lam: _mean_at(pot, rho, lam, points)
    width = slack
    flo, fhi = f(lo), f(hi)
    while not (flo > 0.0 > fhi):
        width *= 2.0
        if width > lam_range:
            raise RuntimeError(f"could not bracket the chemical potential for rho={rho}")
        if flo <= 0.0:
            lo = -v1 - width
            flo = f(lo)
        if fhi >= 0.0:
            hi = -v1 + width
            fhi = f(hi)
    lam = optimize.brentq(f, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    return lam


def _measure_at(pot, rho, lam, points, k_max):
    grid = tilted_grid(pot, rho, lam, points)
    x, w, umin = _weighted(pot, rho, lam, grid)
    mass = w.sum()
    log_z = math.log(mass) - umin
    values = np.exp(-(pot.eval(x + rho) + lam * x) - log_z)
    moments = np.array([np.dot(grid.weights, values * x**k) for k in range(1, k_max + 1)])
    # crude tail bound: boundary integrand over the local decay rate
    ends = []
    for xe in (x[0], x[-1]):
        slope = abs(pot.eval(xe + rho, 1) + lam)
        ends.append(math.exp(-(pot.eval(xe + rho) + lam * xe) - log_z) / max(slope, 1e-300))
    return grid, values, log_z, moments, float(sum(ends))


def solve_chemical_potential(pot: PotentialSpec, rho: float, tol: float = 1e-12,
                             points: int = 4096, k_max: int = 8,
                             lam_range: float = 1e6, max_doublings: int = 4) -> TiltedMeasure:
    """Solve ``int x h(x) dx = 0`` for the chemical potential and build ``h``.

    The mean is strictly decreasing in ``lam`` so a bracketing root finder
    is safe.  The grid resolution is doubled until ``sigma^2`` is stable
    to ``1e-9``.

    Raises
    ------
    RuntimeError
        If the root cannot be bracketed within ``lam_range`` or the discarded
        tail mass exceeds ``1e-9``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    lam = _solve_lambda(pot, rho, points, tol, lam_range)
    grid, values, log_z, moments, tail = _measure_at(pot, rho, lam, points, k_max)
    for _ in range(max_doublings):
        points2 = 2 * points - 1
        lam2 = _solve_lambda(pot, rho, points2, tol, lam_range)
        out2 = _measure_at(pot, rho, lam2, points2, k_max)
        change = abs(out2[3][1] - moments[1])
        points, lam = points2, lam2
        grid, values, log_z, moments, tail = out2
        if change < 1e-9 * max(1.0, moments[1]):
            break
    else:
        warnings.warn(f"sigma^2 not converged under grid doubling at rho={rho}")
    if tail > 1e-9:
        raise RuntimeError(f"discarded tail mass {tail:.3g} exceeds 1e-9 at rho={rho}")
    if abs(moments[0]) > tol * max(1.0, math.sqrt(moments[1])):
        warnings.warn(f"centering residual {moments[0]:.3g} above tol at rho={rho}")
    return TiltedMeasure(pot=pot, rho=float(rho), lam=float(lam), log_z=log_z,
                         sigma2=float(moments[1]), moments=moments, grid=grid,
                         values=values, tail_mass=tail)


def compute_moments(tm: TiltedMeasure, k_max: int) -> np.ndarray:
    """``m_k = int x^k h(x) dx`` for ``k = 1..k_max`` on the measure's grid."""
    if k_max < 2:
        raise ValueError("k_max must be >= 2")
    x, w = tm.grid.nodes, tm.grid.weights
    m = np.array([np.dot(w, tm.values * x**k) for k in range(1, k_max + 1)])
    edge = max(abs(x[0]), abs(x[-1])) ** k_max * max(tm.values[0], tm.values[-1])
    if edge * tm.grid.halfwidth > 1e-10 * abs(m[-1] if k_max % 2 == 0 else m[-2]):
        warnings.warn(f"moment of order {k_max} not negligible at the grid boundary")
    return m


# -- bound checks ----------------------------------------------------------


@dataclass
class MomentBoundReport:
    rho: np.ndarray
    k: float
    ratios: np.ndarray          # (len(rho), n_max - 1): m_{2n} / sigma^{2n}, n = 2..n_max
    bounds: np.ndarray          # prod_{l=2}^n (1 + k l^2)
    max_ratio: float
    ok: bool
    cauchy_schwarz_ok: bool = True


def moment_bound(k: float, n: int) -> float:
    return float(np.prod([1.0 + k * l * l for l in range(2, n + 1)]))


def verify_moment_bounds(pot: PotentialSpec, rho_grid: Sequence[float], n_max: int,
                         measures: Optional[Sequence[TiltedMeasure]] = None) -> MomentBoundReport:
    """Check ``m_{2n} / sigma^{2n} <= prod_{l=2}^n (1 + k l^2)``, ``k = 12 exp(6 |psi|)``.

    Violations are reported, not raised.
    """
    rho = np.asarray(rho_grid, dtype=float)
    if rho.size == 0:
        raise ValueError("rho grid empty")
    k = 12.0 * math.exp(6.0 * pot.psi_sup)
    bounds = np.array([moment_bound(k, n) for n in range(2, n_max + 1)])
    ratios = np.empty((rho.size, n_max - 1))
    cs_ok = True
    for i, r in enumerate(rho):
        tm = measures[i] if measures is not None else solve_chemical_potential(pot, r, k_max=2 * n_max)
        m = compute_moments(tm, 2 * n_max) if tm.moments.size < 2 * n_max else tm.moments
        s2 = m[1]
        ratios[i] = [m[2 * n - 1] / s2**n for n in range(2, n_max + 1)]
        # m_{n+1}^2 <= sigma^2 m_{2n}
        for n in range(1, n_max):
            if m[n] ** 2 > s2 * m[2 * n - 1] * (1 + 1e-9) + 1e-300:
                cs_ok = False
    max_ratio = float(np.max(ratios / bounds))
    return MomentBoundReport(rho, k, ratios, bounds, max_ratio, bool(np.all(ratios <= bounds)), cs_ok)


@dataclass
class SigmaBoundReport:
    rho: np.ndarray
    sigma2: np.ndarray
    phi2_at_rho: np.ndarray
    product: np.ndarray          # sigma^2 * phi''(rho)
    observed_k: float
    jensen_lower: np.ndarray     # 1 / mu[phi''] for the convex part
    bl_upper: np.ndarray         # mu[1 / phi''] for the convex part
    convex_sigma2: np.ndarray
    brackets_ok: bool


def verify_sigma_bounds(pot: PotentialSpec, rho_grid: Sequence[float]) -> SigmaBoundReport:
    """Report the constant in ``1/(k phi''(rho)) <= sigma^2 <= k/phi''(rho)``.

    The Brascamp-Lieb upper bracket and the Jensen lower bracket are checked on
    the convex part alone, where they are theorems.
    """
    rho = np.asarray(rho_grid, dtype=float)
    if rho.size == 0:
        raise ValueError("rho grid empty")
    convex = pot.convex_part()
    s2 = np.empty(rho.size)
    cs2 = np.empty(rho.size)
    lower = np.empty(rho.size)
    upper = np.empty(rho.size)
    for i, r in enumerate(rho):
        tm = solve_chemical_potential(pot, r, k_max=4)
        s2[i] = tm.sigma2
        tc = tm if pot.psi_family == "zero" else solve_chemical_potential(convex, r, k_max=4)
        cs2[i] = tc.sigma2
        x, w = tc.grid.nodes, tc.grid.weights * tc.values
        d2 = convex.phi(x + r, 2)
        lower[i] = 1.0 / np.dot(w, d2)
        upper[i] = np.dot(w, 1.0 / d2)
    phi2 = np.asarray(pot.phi(rho, 2), dtype=float)
    prod = s2 * phi2
    k = float(np.max(np.maximum(prod, 1.0 / prod)))
    ok = bool(np.all(lower <= cs2 * (1 + 1e-10)) and np.all(cs2 <= upper * (1 + 1e-10)))
    return SigmaBoundReport(rho, s2, phi2, prod, k, lower, upper, cs2, ok)


@dataclass
class TailEstimate:
    T: np.ndarray
    tails: np.ndarray
    C: float


def tail_constant(T: np.ndarray, tails: np.ndarray) -> float:
    """Smallest ``C`` with ``tails <= C exp(-T / C)`` on the given points."""
    best = 0.0
    for t, p in zip(T, tails):
        if p <= 0.0:
            continue
        # C exp(-t/C) is increasing in C
        f = lambda c: c * math.exp(-t / c) - p
        lo = 1e-12
        if f(lo) >= 0.0:
            continue
        hi = max(1.0, p)
        while f(hi) < 0.0:
            hi *= 2.0
        best = max(best, optimize.brentq(f, lo, hi, xtol=1e-14))
    return best


def tail_estimate(tm: TiltedMeasure, T_grid: Sequence[float]) -> TailEstimate:
    """``mu(|xi| >= sigma T)`` for each ``T``, integrated from the analytic density."""
    T = np.asarray(T_grid, dtype=float)
    if np.any(T < 0):
        raise ValueError("T grid must be nonnegative")
    lo, hi = tm.support
    span = hi - lo
    if tm.sigma * T.max() > tm.grid.halfwidth:
        warnings.warn("sigma * max(T) exceeds the grid halfwidth")
    dens = tm.density
    out = np.empty(T.size)
    for i, t in enumerate(T):
        a = tm.sigma * t
        if a == 0.0:
            out[i] = 1.0
            continue
        right = integrate.quad(dens, a, max(hi, a) + span, limit=200, epsabs=1e-15, epsrel=1e-12)[0]
        left = integrate.quad(dens, min(lo, -a) - span, -a, limit=200, epsabs=1e-15, epsrel=1e-12)[0]
        out[i] = right + left
    return TailEstimate(T, out, tail_constant(T, out))


def char_function(tm: TiltedMeasure, zeta_grid) -> np.ndarray:
    """Characteristic function of ``xi / sigma`` at the points ``zeta_grid``."""
    zeta = np.atleast_1d(np.asarray(zeta_grid, dtype=float))
    x = tm.grid.nodes / tm.sigma
    w = tm.grid.weights * tm.values
    out = np.empty(zeta.size, dtype=complex)
    chunk = max(1, 2_000_000 // x.size)
    for s in range(0, zeta.size, chunk):
        z = zeta[s:s + chunk]
        out[s:s + chunk] = np.exp(1j * np.outer(z, x)) @ w
    return out


@dataclass
class CharFunctionBounds:
    decay_c: float      # max zeta^2 |v(zeta)| over |zeta| >= 1
    c_eps: float        # sup |v(zeta)| over eps <= |zeta| <= zeta_max
    eps: float
    zeta_max: float


def char_function_bounds(tm: TiltedMeasure, eps: float = 0.5, zeta_max: float = 50.0,
                         n_points: int = 2000) -> CharFunctionBounds:
    zeta = np.linspace(eps, zeta_max, n_points)
    v = np.abs(char_function(tm, zeta))
    big = zeta >= 1.0
    decay = float(np.max(zeta[big] ** 2 * v[big])) if np.any(big) else math.nan
    return CharFunctionBounds(decay, float(np.max(v)), eps, zeta_max)
