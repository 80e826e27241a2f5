"""Poincaré constants of the canonical measure and the operator ``P``.

The canonical measure lives on the hyperplane ``sum eta_i = n rho``.  The
exact branch works in orthonormal tangent coordinates ``u`` (``eta = rho +
U u``), where a Dirichlet form reads ``nu[grad_u f . A grad_u f]``.  With
``A = I`` this is the full-gradient form restricted to functions of the
hyperplane point (the normal derivative only adds a nonnegative term, so
it never helps the supremum).  Variational problems are solved by
Rayleigh-Ritz on a Legendre basis of bounded total degree with tensor
trapezoidal quadrature.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import mpmath
import numpy as np
from numpy.polynomial import legendre as leg

from .kop import KOperator, build_k, projected_norm
from .potential import PotentialSpec

logger = logging.getLogger(__name__)

KINDS = ("poincare_gamma", "gl_chi")
METHODS = ("exact_eigen", "mcmc_rayleigh", "recursion_bound")


class SelfCheckError(RuntimeError):
    """A numerical self-consistency check failed."""


@dataclass(frozen=True)
class GapEstimate:
    size: int
    rho: float
    value: float
    kind: str = "poincare_gamma"
    method: str = "exact_eigen"
    uncertainty: float = 0.0
    valid: bool = True
    detail: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not self.value > 0:
            raise ValueError("a gap estimate must be positive")
        if self.method == "exact_eigen" and self.uncertainty != 0.0:
            raise ValueError("exact estimates carry no uncertainty")

    def to_row(self) -> dict:
        return {"N": self.size, "rho": self.rho, "gamma": self.value,
                "method": self.method, "uncertainty": self.uncertainty}


# -- slice geometry -------------------------------------------------------


def tangent_basis(n: int) -> np.ndarray:
    """Orthonormal ``n x (n-1)`` basis of the hyperplane ``sum x_i = 0``."""
    if n < 2:
        raise ValueError("n must be >= 2")
    a = np.vstack([np.ones(n), np.eye(n)[:-1]]).T
    q, _ = np.linalg.qr(a)
    u = q[:, 1:]
    # fix signs for reproducibility
    return u * np.sign(u[np.argmax(np.abs(u), axis=0), np.arange(n - 1)])


def slice_energy(pot: PotentialSpec, n: int, rho: float) -> Callable:
    """``u -> sum_i V(rho + (U u)_i)`` minus its value and slope at ``u = 0``."""
    U = tangent_basis(n)
    v0 = float(pot.eval(rho))
    v1 = float(pot.eval(rho, 1))

    def energy(u):
        x = np.asarray(u) @ U.T
        return np.sum(pot.eval(rho + x) - v0 - v1 * x, axis=-1)

    return energy


def _slice_box(energy, d: int, drop: float, coarse: int = 65):
    r = 1.0
    for _ in range(40):
        g = np.linspace(-r, r, coarse)
        pts = np.stack(np.meshgrid(*([g] * d), indexing="ij"), axis=-1).reshape(-1, d)
        e = energy(pts)
        emin = e.min()
        edge = np.any(np.abs(pts) >= r * (1 - 1e-12), axis=1)
        if e[edge].min() > emin + drop + 5.0:
            inside = pts[e < emin + drop + 5.0]
            step = 2 * r / (coarse - 1)
            return inside.min(axis=0) - step, inside.max(axis=0) + step
        r *= 2.0
    raise RuntimeError("slice measure does not decay; cannot bound the integration box")


@dataclass(frozen=True)
class SliceQuadrature:
    points: np.ndarray       # (Q, d)
    weights: np.ndarray      # probability weights, sum 1
    lo: np.ndarray
    hi: np.ndarray


def slice_quadrature(energy, d: int, resolution: int, drop: float = 40.0) -> SliceQuadrature:
    lo, hi = _slice_box(energy, d, drop)
    axes = [np.linspace(lo[i], hi[i], resolution) for i in range(d)]
    tw = []
    for ax in axes:
        w = np.full(resolution, ax[1] - ax[0])
        w[0] = w[-1] = 0.5 * w[0]
        tw.append(w)
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    cell = tw[0]
    for w in tw[1:]:
        cell = np.multiply.outer(cell, w)
    e = energy(pts)
    w = cell.reshape(-1) * np.exp(-(e - e.min()))
    return SliceQuadrature(pts, w / w.sum(), lo, hi)


def _multi_indices(d: int, degree: int):
    return [a for a in itertools.product(range(degree + 1), repeat=d) if 0 < sum(a) <= degree]


def legendre_basis(quad: SliceQuadrature, degree: int):
    """Values and gradients of tensor Legendre polynomials of total degree ``1..degree``.

    Returns ``(phi, dphi)`` with shapes ``(Q, B)`` and ``(d, Q, B)``.
    """
    d = quad.points.shape[1]
    c = 0.5 * (quad.lo + quad.hi)
    half = 0.5 * (quad.hi - quad.lo)
    s = (quad.points - c) / half
    vals, ders = [], []
    for k in range(d):
        v = leg.legvander(s[:, k], degree)
        dv = np.zeros_like(v)
        for a in range(1, degree + 1):
            coef = np.zeros(a + 1)
            coef[a] = 1.0
            dv[:, a] = leg.legval(s[:, k], leg.legder(coef)) / half[k]
        vals.append(v)
        ders.append(dv)
    idx = _multi_indices(d, degree)
    phi = np.empty((s.shape[0], len(idx)))
    dphi = np.empty((d, s.shape[0], len(idx)))
    for b, a in enumerate(idx):
        phi[:, b] = np.prod([vals[k][:, a[k]] for k in range(d)], axis=0)
        for j in range(d):
            dphi[j, :, b] = np.prod([(ders if k == j else vals)[k][:, a[k]] for k in range(d)], axis=0)
    return phi, dphi


def rayleigh_ritz_min(phi, dphi, w, A, cutoff: float = 1e-12) -> tuple:
    """Smallest ratio Dirichlet / variance over the span of the basis.

    Returns ``(lambda_min, coefficients)``.
    """
    mean = w @ phi
    pc = phi - mean
    m = (pc * w[:, None]).T @ pc
    d = dphi.shape[0]
    e = np.zeros_like(m)
    for i in range(d):
        wi = dphi[i] * w[:, None]
        for j in range(d):
            if A[i, j] != 0.0:
                e += A[i, j] * (wi.T @ dphi[j])
    m = 0.5 * (m + m.T)
    e = 0.5 * (e + e.T)
    lam, q = np.linalg.eigh(m)
    keep = lam > cutoff * lam.max()
    t = q[:, keep] / np.sqrt(lam[keep])
    h = t.T @ e @ t
    ev, vec = np.linalg.eigh(0.5 * (h + h.T))
    return float(ev[0]), t @ vec[:, 0]


def default_degree(d: int) -> int:
    return 24 if d == 1 else 12


def slice_gap(pot: PotentialSpec, n: int, rho: float, A: Optional[np.ndarray] = None,
              resolution: int = 128, degree: Optional[int] = None) -> float:
    """Smallest nonzero eigenvalue of the Dirichlet form ``A`` on the slice."""
    d = n - 1
    if d > 2:
        raise ValueError("the exact slice solver handles at most two slice dimensions")
    A = np.eye(d) if A is None else np.asarray(A, dtype=float)
    degree = default_degree(d) if degree is None else degree
    quad = slice_quadrature(slice_energy(pot, n, rho), d, resolution)
    phi, dphi = legendre_basis(quad, degree)
    lam, _ = rayleigh_ritz_min(phi, dphi, quad.weights, A)
    return lam


def _checked_inverse_gap(pot, n, rho, A, resolution, degree, tol):
    d = n - 1
    degree = default_degree(d) if degree is None else degree
    lam = slice_gap(pot, n, rho, A, resolution, degree)
    lam2 = slice_gap(pot, n, rho, A, 2 * resolution, degree + 8)
    rel = abs(lam2 - lam) / abs(lam2)
    if rel > tol:
        raise SelfCheckError(f"slice gap moved by {rel:.3g} under refinement (n={n}, rho={rho})")
    return 1.0 / lam2, rel


def exact_gap_small_n(pot: PotentialSpec, n: int, rho: float, resolution: int = 128,
                      degree: Optional[int] = None, tol: float = 1e-4) -> GapEstimate:
    """``gamma(n, rho)`` for ``n`` in ``{2, 3}`` from the slice eigenproblem.

    Raises
    ------
    SelfCheckError
        If doubling the resolution (and raising the degree) moves the result
        by more than ``tol`` relative.
    """
    if n not in (2, 3):
        raise ValueError("exact branch supports n = 2 or 3")
    if resolution < 128:
        raise ValueError("resolution must be >= 128")
    g, rel = _checked_inverse_gap(pot, n, rho, None, resolution, degree, tol)
    return GapEstimate(n, float(rho), g, detail={"refinement_change": rel})


def nzero_bound(pot: PotentialSpec, n: int) -> float:
    """``delta^{-1} exp(4 n |psi|)``."""
    if not pot.delta > 0:
        return math.inf
    return math.exp(4 * n * pot.psi_sup) / pot.delta


@dataclass
class UniformityReport:
    n: int
    rho: np.ndarray
    gamma: np.ndarray
    bound: float
    spread: float           # max gamma / min gamma
    within_bound: bool


def gamma_sweep(pot: PotentialSpec, n: int, rho_grid: Sequence[float], resolution: int = 128) -> UniformityReport:
    rho = np.asarray(rho_grid, dtype=float)
    if rho.size == 0:
        raise ValueError("rho grid empty")
    g = np.array([exact_gap_small_n(pot, n, r, resolution).value for r in rho])
    b = nzero_bound(pot, n)
    return UniformityReport(n, rho, g, b, float(g.max() / g.min()), bool(np.all(g <= b)))


# -- Symmetric lifts and the operator P -----------------------------------------


@dataclass(frozen=True)
class SymmetricLift:
    """``F = sum_k f_k(eta_k)`` with each ``f_k`` centred under the marginal."""

    component_functions: np.ndarray      # (n, m)

    @property
    def n(self) -> int:
        return self.component_functions.shape[0]

    @property
    def phi_f(self) -> np.ndarray:
        return self.component_functions.sum(axis=0)

    def check(self, k: KOperator, tol: float = 1e-10) -> None:
        scale = max(1.0, float(np.max(np.abs(self.component_functions))))
        for f in self.component_functions:
            if abs(k.mean(f)) > tol * scale:
                raise ValueError("component function is not centred")


@dataclass(frozen=True)
class POperator:
    """Quadratic forms of ``P`` on lifts, expressed through ``K``."""

    k: KOperator

    @property
    def n(self) -> int:
        return self.k.n

    def norm2(self, F: SymmetricLift) -> float:
        """``nu(F^2)``."""
        k, phi = self.k, F.phi_f
        return k.inner(phi, k.apply(phi)) + sum(k.inner(f, f - k.apply(f)) for f in F.component_functions)

    def form(self, F: SymmetricLift) -> float:
        """``nu(F (1 - P) F)``."""
        k, n, phi = self.k, self.n, F.phi_f
        kphi = k.apply(phi)
        out = (n - 2) / n * k.inner(phi, kphi - k.apply(kphi))
        for f in F.component_functions:
            kf = k.apply(f)
            r = (n - 1) * f + kf
            out += k.inner(f, r - k.apply(r)) / n
        return out

    def conditional_second_moment(self, F: SymmetricLift, idx: int) -> float:
        """``nu(F nu(F | F_k))``."""
        k = self.k
        phi, f = F.phi_f, F.component_functions[idx]
        omk = f - k.apply(f)
        kphi = k.apply(phi)
        return 2 * k.inner(kphi, omk) + k.inner(omk, omk) + k.inner(kphi, kphi)

    def symmetric_norm2(self, f) -> float:
        n, k = self.n, self.k
        return n * (n - 1) * k.inner(f, k.apply(f) + f / (n - 1))

    def symmetric_form(self, f) -> float:
        n, k = self.n, self.k
        g = k.apply(f) + f / (n - 1)
        return (n - 1) ** 2 * k.inner(f, g - k.apply(g))

    def hat(self, f) -> np.ndarray:
        """``(1 - K)^{1/2} f``."""
        m = self.k.function_of(lambda w: np.sqrt(np.clip(1.0 - w, 0.0, None)))
        return m @ f

    def orthogonal_norm2(self, F: SymmetricLift) -> float:
        return sum(self.k.inner(g, g) for g in (self.hat(f) for f in F.component_functions))

    def orthogonal_form(self, F: SymmetricLift) -> float:
        k, n = self.k, self.n
        tot = 0.0
        for f in F.component_functions:
            g = self.hat(f)
            tot += k.inner(g, (n - 1) * g + k.apply(g))
        return tot / n


def random_lift(k: KOperator, rng: np.random.Generator, kind: str = "gamma", n: Optional[int] = None) -> SymmetricLift:
    """Random smooth trial lift: ``gamma`` (generic), ``symmetric`` or ``orthogonal`` (``Phi_F = 0``)."""
    n = k.n if n is None else n
    z = k.xbar / k.sigma

    def one():
        c = rng.normal(size=5)
        a, b = rng.uniform(0.3, 2.0, size=2)
        f = c[0] * z + c[1] * z**2 + c[2] * z**3 / 3 + c[3] * np.sin(a * z) + c[4] * np.cos(b * z)
        return k.center(f)

    if kind == "gamma":
        comps = [one() for _ in range(n)]
    elif kind == "symmetric":
        f = one()
        comps = [f] * n
    elif kind == "orthogonal":
        comps = [one() for _ in range(n - 1)]
        comps.append(-np.sum(comps, axis=0))
    else:
        raise ValueError(f"unknown lift kind {kind!r}")
    return SymmetricLift(np.array(comps))


# -- direct three-site oracle ------------------------------------------------


@dataclass(frozen=True)
class ThreeSiteOracle:
    """Canonical measure of three lattice sites by direct enumeration.

    ``joint[i, j]`` is the probability of ``(x_1, x_2) = (node_i, node_j)``;
    the third site sits at index ``-(i + j)`` in the single-site lattice.
    """

    joint: np.ndarray
    third: np.ndarray      # position of site 3 in the single-site arrays, -1 if off-lattice

    @classmethod
    def from_k(cls, k: KOperator) -> "ThreeSiteOracle":
        if k.n != 3 or k.lattice is None:
            raise ValueError("the direct oracle needs a lattice-built K with n = 3")
        h = k.lattice.h
        idx = h.k0 + np.arange(h.pmf.size)
        third_abs = -(idx[:, None] + idx[None, :])
        pos = third_abs - h.k0
        ok = (pos >= 0) & (pos < h.pmf.size)
        p3 = np.where(ok, h.pmf[np.clip(pos, 0, h.pmf.size - 1)], 0.0)
        joint = h.pmf[:, None] * h.pmf[None, :] * p3
        return cls(joint / joint.sum(), np.where(ok, pos, -1))

    def values(self, F: SymmetricLift) -> np.ndarray:
        f1, f2, f3 = F.component_functions
        v3 = np.where(self.third >= 0, f3[np.clip(self.third, 0, None)], 0.0)
        return f1[:, None] + f2[None, :] + v3

    def conditional_means(self, v: np.ndarray):
        """``nu(V | F_k)`` on the slice, for ``k = 1, 2, 3``."""
        p = self.joint
        out = []
        m1 = (p * v).sum(axis=1) / p.sum(axis=1)
        out.append(np.broadcast_to(m1[:, None], v.shape))
        m2 = (p * v).sum(axis=0) / p.sum(axis=0)
        out.append(np.broadcast_to(m2[None, :], v.shape))
        lab = np.where(self.third >= 0, self.third, 0)
        num = np.bincount(lab.ravel(), (p * v).ravel(), minlength=p.shape[0])
        den = np.bincount(lab.ravel(), p.ravel(), minlength=p.shape[0])
        m3 = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
        out.append(m3[lab])
        return out

    def expect(self, v) -> float:
        return float(np.sum(self.joint * v))


def _rel(a: float, b: float, scale: float) -> float:
    return abs(a - b) / max(abs(scale), 1e-300)


def verify_variance_decomposition(k: KOperator, trial_functions: Sequence[SymmetricLift]) -> dict:
    """Residuals of the variance identities on trial lifts.

    For ``n = 3`` the K-side is compared with direct enumeration of the
    three-site lattice measure; for larger ``n`` only the K-side identities
    between sectors are checked.  Returns a dict of max relative residuals
    (keys: ``total_variance``, ``norm``, ``form``, ``conditional``,
    ``symmetric_norm``, ``symmetric_form``, ``orthogonal_norm``,
    ``orthogonal_form``, ``cross``) and ``max``.
    """
    P = POperator(k)
    n = k.n
    oracle = ThreeSiteOracle.from_k(k) if n == 3 else None
    res = {key: 0.0 for key in ("total_variance", "norm", "form", "conditional", "symmetric_norm",
                                "symmetric_form", "orthogonal_norm", "orthogonal_form", "cross")}

    def bump(key, val):
        res[key] = max(res[key], val)

    for F in trial_functions:
        F.check(k)
        comps = F.component_functions
        nf2 = P.norm2(F)
        scale = max(nf2, sum(k.inner(f, f) for f in comps))
        if oracle is not None:
            v = oracle.values(F)
            cm = oracle.conditional_means(v)
            var = oracle.expect(v * v) - oracle.expect(v) ** 2
            cond_var = sum(oracle.expect(v * v) - oracle.expect(c * c) for c in cm) / n
            var_cond = sum(oracle.expect(c * c) - oracle.expect(c) ** 2 for c in cm) / n
            bump("total_variance", _rel(var, cond_var + var_cond, scale))
            bump("norm", _rel(oracle.expect(v * v), nf2, scale))
            pf = sum(oracle.expect(c * c) for c in cm) / n
            bump("form", _rel(oracle.expect(v * v) - pf, P.form(F), scale))
            for i, c in enumerate(cm):
                bump("conditional", _rel(oracle.expect(v * c), P.conditional_second_moment(F, i), scale))
        same = np.allclose(comps, comps[0], rtol=0, atol=0)
        if same:
            f = comps[0]
            bump("symmetric_norm", _rel(nf2, P.symmetric_norm2(f), scale))
            bump("symmetric_form", _rel(P.form(F), P.symmetric_form(f), scale))
        phi = F.phi_f
        if np.max(np.abs(phi)) <= 1e-12 * max(1.0, np.max(np.abs(comps))):
            bump("orthogonal_norm", _rel(nf2, P.orthogonal_norm2(F), scale))
            bump("orthogonal_form", _rel(P.form(F), P.orthogonal_form(F), scale))
        if oracle is not None:
            # nu(F G) for symmetric G built from the first component
            g = comps[0]
            G = SymmetricLift(np.array([g] * n))
            lhs = oracle.expect(oracle.values(F) * oracle.values(G))
            rhs = (n - 1) * k.inner(phi, k.apply(g) + g / (n - 1))
            bump("cross", _rel(lhs, rhs, scale))
    res["max"] = max(res.values())
    return res


@dataclass
class PGapReport:
    n: int
    rho: float
    symmetric_ratio: float       # min nu(F(1-P)F)/nu(F^2) on the symmetric sector
    symmetric_bound: float       # (n-1)/n (1 - eps), eps the projected norm of K
    orthogonal_ratio: float
    orthogonal_bound: float      # (n-2)/(n-1)
    confinement: float
    symmetric_ok: bool
    orthogonal_ok: bool
    margin_symmetric: float
    margin_orthogonal: float

    @property
    def ok(self) -> bool:
        return self.symmetric_ok and self.orthogonal_ok


def verify_p_gap(k: KOperator, tol: float = 1e-9) -> PGapReport:
    """Spectral gap of ``1 - P`` on the symmetric and orthogonal sectors.

    Violations are reported through the flags and margins, not raised.
    """
    from .kop import complement_basis

    n = k.n
    if n < 4:
        raise ValueError("n must be >= 4")
    c = 1.0 / (n - 1)
    z = complement_basis(k)
    s = k.sym
    ident = np.eye(s.shape[0])
    a = z.T @ (ident - s) @ (s + c * ident) @ z
    b = z.T @ (s + c * ident) @ z
    a, b = 0.5 * (a + a.T), 0.5 * (b + b.T)
    bl, bv = np.linalg.eigh(b)
    if bl[0] <= 0:
        sym_ratio = -math.inf
    else:
        t = bv / np.sqrt(bl)
        mu = np.linalg.eigvalsh(t.T @ a @ t)[0]
        sym_ratio = (n - 1) / n * float(mu)
    eps = projected_norm(k)
    sym_bound = (n - 1) / n * (1 - eps)
    # orthogonal sector: min over centred functions of <f, K f>/<f, f>
    sq = np.sqrt(k.marginal_weights)
    q, _ = np.linalg.qr(np.column_stack([sq, np.eye(s.shape[0])]))
    y = q[:, 1:]
    kmin = float(np.linalg.eigvalsh(y.T @ s @ y)[0])
    orth_ratio = (n - 1 + kmin) / n
    orth_bound = (n - 2) / (n - 1)
    return PGapReport(n, k.rho, sym_ratio, sym_bound, orth_ratio, orth_bound, eps,
                      sym_ratio >= sym_bound - tol, orth_ratio >= orth_bound - tol,
                      sym_ratio - sym_bound, orth_ratio - orth_bound)


# -- recursion ----------------------------------------------------------------


def product_bound(C: float, n0: int = 2) -> float:
    """``prod_{N > n0} (1 + C N^{-3/2})`` summed in log space to convergence.

    The log-sum has an algebraic tail, which defeats the default Richardson and
    Shanks extrapolation; Euler-Maclaurin summation handles it.
    """
    if C < 0:
        raise ValueError("C must be nonnegative")
    if C == 0:
        return 1.0
    with mpmath.workdps(30):
        s = mpmath.nsum(lambda N: mpmath.log1p(C * N ** mpmath.mpf(-1.5)), [n0 + 1, mpmath.inf],
                        method="euler-maclaurin")
        return float(mpmath.exp(s))


def fit_recursion_constant(sizes: Sequence[int], gammas: Sequence[float]) -> float:
    """Smallest ``C >= 0`` with ``gamma(N) <= (1 + C N^{-3/2}) gamma(N-1)``."""
    sizes = list(sizes)
    best = 0.0
    for i in range(1, len(sizes)):
        n = sizes[i]
        best = max(best, (gammas[i] / gammas[i - 1] - 1.0) * n**1.5)
    return best


@dataclass
class RecursionReport:
    sizes: list
    gamma: list               # point values (exact or MCMC lower bounds)
    lower: list
    upper: list
    methods: list
    argmax_rho: list
    C: float
    C_prime: float
    flags: list

    def to_dict(self) -> dict:
        return {"sizes": self.sizes, "gamma": self.gamma, "lower": self.lower, "upper": self.upper,
                "methods": self.methods, "argmax_rho": self.argmax_rho, "C": self.C,
                "C_prime": self.C_prime, "flags": self.flags}


def recursion_check(pot: PotentialSpec, rho_grid: Sequence[float], n_max: int,
                    resolution: int = 128, sampler_config=None) -> RecursionReport:
    """``gamma(N) = max_rho gamma(N, rho)`` for ``N = 2..n_max`` and the fitted recursion constant.

    ``N <= 3`` is exact; ``N`` in ``{4, 5}`` is bracketed between an MCMC
    Rayleigh lower bound and the product-measure upper bound.
    """
    rho = np.asarray(rho_grid, dtype=float)
    if rho.size == 0:
        raise ValueError("rho grid empty")
    if n_max < 2 or n_max > 5:
        raise ValueError("n_max must lie in 2..5")
    sizes, gam, lo, hi, meth, arg, flags = [], [], [], [], [], [], []
    for n in range(2, n_max + 1):
        if n <= 3:
            vals = [exact_gap_small_n(pot, n, r, resolution).value for r in rho]
            i = int(np.argmax(vals))
            g = vals[i]
            sizes.append(n); gam.append(g); lo.append(g); hi.append(g)
            meth.append("exact_eigen"); arg.append(float(rho[i]))
        else:
            ests = [mcmc_gap_bound(pot, n, r, sampler_config) for r in rho]
            i = int(np.argmax([e.value for e in ests]))
            e = ests[i]
            sizes.append(n); gam.append(e.value); lo.append(e.value - 2 * e.uncertainty)
            hi.append(nzero_bound(pot, n)); meth.append("mcmc_rayleigh"); arg.append(float(rho[i]))
            if not e.valid:
                flags.append(f"N={n}: chains not converged (R-hat {e.detail.get('rhat', float('nan')):.3g})")
    C = fit_recursion_constant(sizes, gam)
    return RecursionReport(sizes, gam, lo, hi, meth, arg, C, product_bound(C, 2), flags)


# -- Monte Carlo Rayleigh bound -------------------------------------------------


def trial_dictionary(n: int):
    """Centred degree <= 3 polynomial dictionary and its gradients.

    Returns a function mapping ``xbar`` (samples x n) to ``(values, grads)``
    with shapes ``(S, D)`` and ``(S, D, n)``.
    """
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]

    def evaluate(x):
        s = x.shape[0]
        vals, grads = [], []
        for p in (1, 2, 3):
            for i in range(n):
                vals.append(x[:, i] ** p)
                g = np.zeros((s, n))
                g[:, i] = p * x[:, i] ** (p - 1)
                grads.append(g)
        for i, j in pairs:
            vals.append(x[:, i] * x[:, j])
            g = np.zeros((s, n))
            g[:, i] = x[:, j]
            g[:, j] = x[:, i]
            grads.append(g)
        return np.stack(vals, axis=1), np.stack(grads, axis=1)

    return evaluate


def rayleigh_from_samples(vals: np.ndarray, grads: np.ndarray, gradient: str = "full",
                          cutoff: float = 1e-10) -> float:
    """Largest ``var(F) / E(F)`` over the span of the dictionary."""
    if gradient == "tangential":
        grads = grads - grads.mean(axis=2, keepdims=True)
    elif gradient != "full":
        raise ValueError("gradient must be 'full' or 'tangential'")
    cov = np.cov(vals, rowvar=False, bias=True)
    cov = np.atleast_2d(cov)
    dir_ = np.einsum("sai,sbi->ab", grads, grads) / grads.shape[0]
    lam, q = np.linalg.eigh(0.5 * (dir_ + dir_.T))
    keep = lam > cutoff * lam.max()
    if not keep.any():
        raise ValueError("zero Dirichlet form on the whole dictionary")
    t = q[:, keep] / np.sqrt(lam[keep])
    return float(np.linalg.eigvalsh(t.T @ cov @ t)[-1])


def rayleigh_ratio(vals: np.ndarray, grads: np.ndarray, gradient: str = "full") -> float:
    """``var(F) / E(F)`` for a single trial function.

    Raises
    ------
    ValueError
        If the Dirichlet form vanishes (e.g. constant ``F``).
    """
    vals = np.asarray(vals, dtype=float).reshape(-1)
    grads = np.asarray(grads, dtype=float)
    if gradient == "tangential":
        grads = grads - grads.mean(axis=1, keepdims=True)
    e = float(np.mean(np.sum(grads**2, axis=1)))
    if e <= 0:
        raise ValueError("zero Dirichlet form: constant trial function rejected")
    return float(np.var(vals)) / e


def mcmc_gap_bound(pot: PotentialSpec, n: int, rho: float, sampler_config=None) -> GapEstimate:
    """Monte Carlo lower bound on ``gamma(n, rho)`` from the trial dictionary.

    The value is a lower bound on the Poincaré constant (an upper bound on the
    gap); it is never reported as the constant itself.  Chains with a split
    R-hat above 1.1 flag the estimate invalid.
    """
    from .sampler import SamplerConfig, run_chains, split_rhat

    cfg = sampler_config if sampler_config is not None else SamplerConfig()
    run = run_chains(pot, n, rho, cfg)
    x = run.samples - rho                        # (chains, draws, n)
    evaluate = trial_dictionary(n)
    flat = x.reshape(-1, n)
    vals, grads = evaluate(flat)
    ratio = rayleigh_from_samples(vals, grads, cfg.gradient)
    rhat = max(split_rhat(vals[:, j].reshape(x.shape[0], x.shape[1])) for j in range(vals.shape[1]))
    rng = np.random.default_rng(cfg.seed + 7919)
    nb = max(2, cfg.bootstrap_blocks)
    draws = x.shape[1]
    blk = max(1, draws // nb)
    boots = []
    v3 = vals.reshape(x.shape[0], draws, -1)
    g3 = grads.reshape(x.shape[0], draws, grads.shape[1], n)
    for _ in range(cfg.bootstrap):
        picks = rng.integers(0, nb, size=nb)
        idx = np.concatenate([np.arange(p * blk, min((p + 1) * blk, draws)) for p in picks])
        boots.append(rayleigh_from_samples(v3[:, idx].reshape(-1, v3.shape[2]),
                                           g3[:, idx].reshape(-1, g3.shape[2], n), cfg.gradient))
    unc = float(np.std(boots))
    return GapEstimate(n, float(rho), ratio, method="mcmc_rayleigh", uncertainty=unc,
                       valid=bool(rhat <= 1.1), detail={"rhat": float(rhat), "draws": int(flat.shape[0])})
