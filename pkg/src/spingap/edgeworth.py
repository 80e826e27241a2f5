"""Convolution powers of the tilted density, Edgeworth approximation and
the pair kernel of the canonical measure.

All convolutions are carried out on a lattice ``offset + k * spacing``.
The single-site density is sampled on that lattice and turned into a
probability vector; sums of ``n`` sites then live on the lattice
``n * offset + k * spacing`` and their probability vectors are exact
discrete convolution powers.  Because the sampled densities are smooth and
rapidly decaying the lattice model agrees with the continuum to rounding
level (Poisson summation), and it has the useful property that conditional
identities such as ``E[x_2 | x_1] = -x_1 / (n - 1)`` hold exactly.

Direct (not FFT) convolution is used so that tail entries keep full
relative precision; ratios of tail values enter the pair kernel.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .single_site import DensityGrid, TiltedMeasure

logger = logging.getLogger(__name__)

DEFAULT_RESOLUTION = 256
DEFAULT_B = 10.0
TINY = np.finfo(float).tiny


# -- lattice sampling -----------------------------------------------------


@dataclass(frozen=True)
class LatticePMF:
    """Probability vector on the nodes ``offset + (k0 + k) * spacing``."""

    spacing: float
    offset: float
    k0: int
    pmf: np.ndarray

    @property
    def nodes(self) -> np.ndarray:
        return self.offset + (self.k0 + np.arange(self.pmf.size)) * self.spacing

    @property
    def density(self) -> np.ndarray:
        return self.pmf / self.spacing

    def at_index(self, k) -> np.ndarray:
        """pmf at absolute lattice indices ``k`` (zero outside the stored range)."""
        k = np.asarray(k) - self.k0
        out = np.zeros(k.shape)
        ok = (k >= 0) & (k < self.pmf.size)
        out[ok] = self.pmf[k[ok]]
        return out


def lattice_spacing(tm: TiltedMeasure, resolution: int) -> float:
    if resolution < 8:
        raise ValueError("resolution must be at least 8")
    lo, hi = tm.support
    return (hi - lo) / (resolution - 1)


def sample_lattice(tm: TiltedMeasure, spacing: float, offset: float = 0.0) -> LatticePMF:
    """Sample ``h`` on ``offset + k * spacing`` across its support and normalise."""
    lo, hi = tm.support
    k_lo = int(math.ceil((lo - offset) / spacing))
    k_hi = int(math.floor((hi - offset) / spacing))
    nodes = offset + np.arange(k_lo, k_hi + 1) * spacing
    p = tm.density(nodes) * spacing
    mass = p.sum()
    if abs(mass - 1.0) > 1e-6:
        raise RuntimeError(f"lattice mass {mass:.3g} deviates from 1; spacing too coarse")
    return LatticePMF(spacing, offset, k_lo, p / mass)


def _trim(pmf: np.ndarray, k0: int):
    pmf = np.where(pmf < TINY, 0.0, pmf)
    nz = np.flatnonzero(pmf)
    if nz.size == 0:
        raise RuntimeError("convolution underflowed completely")
    return pmf[nz[0]:nz[-1] + 1], k0 + int(nz[0])


def convolve_pmf(a: LatticePMF, b: LatticePMF, renormalize: bool = False,
                 drift_tol: float = 1e-6) -> LatticePMF:
    """Distribution of the sum of independent lattice variables."""
    if not math.isclose(a.spacing, b.spacing, rel_tol=1e-13):
        raise ValueError("lattices have different spacings")
    p, k0 = _trim(np.convolve(a.pmf, b.pmf), a.k0 + b.k0)
    if renormalize:
        mass = p.sum()
        if abs(mass - 1.0) > drift_tol:
            raise RuntimeError(f"renormalisation drift {abs(mass - 1):.3g} exceeds {drift_tol:g}")
        p = p / mass
    return LatticePMF(a.spacing, a.offset + b.offset, k0, p)


def pmf_power(base: LatticePMF, n: int, drift_tol: float = 1e-6) -> LatticePMF:
    """``n``-fold convolution power by binary exponentiation."""
    if n < 1:
        raise ValueError("n must be >= 1")
    result: Optional[LatticePMF] = None
    sq = base
    while True:
        if n & 1:
            result = sq if result is None else convolve_pmf(result, sq, True, drift_tol)
        n >>= 1
        if not n:
            return result
        sq = convolve_pmf(sq, sq, True, drift_tol)


# -- convolved densities --------------------------------------------------


@dataclass(frozen=True)
class ConvolvedDensity:
    """Density of ``S = x_1 + ... + x_n`` with ``x_i`` i.i.d. with density ``h``.

    ``G_n(x)`` is the density of ``S`` at ``-x``.
    """

    n: int
    rho: float
    sigma: float
    lattice: LatticePMF

    @property
    def nodes(self) -> np.ndarray:
        return self.lattice.nodes

    @property
    def values(self) -> np.ndarray:
        return self.lattice.density

    @property
    def spacing(self) -> float:
        return self.lattice.spacing

    def mass(self) -> float:
        return float(self.lattice.pmf.sum())

    def sum_density(self, s):
        """Density of ``S`` at arbitrary points (cubic interpolation between nodes)."""
        s = np.asarray(s, dtype=float)
        nodes = self.nodes
        if nodes.size < 4:
            return np.interp(s, nodes, self.values, left=0.0, right=0.0)
        spline = CubicSpline(nodes, self.values, extrapolate=False)
        out = spline(s)
        return np.where(np.isnan(out), 0.0, np.maximum(out, 0.0))

    def G(self, x):
        return self.sum_density(-np.asarray(x, dtype=float))

    def normalized(self, z):
        """``F_n(z) = sigma sqrt(n) G_n(-z sigma sqrt(n))``."""
        scale = self.sigma * math.sqrt(self.n)
        return scale * self.sum_density(np.asarray(z, dtype=float) * scale)

    def normalized_on_nodes(self):
        """``(z, F_n(z))`` at the lattice nodes (no interpolation)."""
        scale = self.sigma * math.sqrt(self.n)
        return self.nodes / scale, scale * self.values


def convolve_density(tm: TiltedMeasure, n: int, resolution: int = DEFAULT_RESOLUTION,
                     offset: float = 0.0, drift_tol: float = 1e-6) -> ConvolvedDensity:
    """``n``-fold self-convolution of ``h`` on a lattice with ``resolution`` nodes
    across the single-site support.

    Raises
    ------
    RuntimeError
        If the mass drifts by more than ``drift_tol`` at any doubling.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    base = sample_lattice(tm, lattice_spacing(tm, resolution), offset)
    return ConvolvedDensity(n, tm.rho, tm.sigma, pmf_power(base, n, drift_tol))


def cf_inversion(tm: TiltedMeasure, n: int, nodes: np.ndarray) -> np.ndarray:
    """Density of the ``n``-fold sum at equally spaced ``nodes`` by Fourier inversion.

    The characteristic function is computed by quadrature on the measure's own
    grid, raised to the ``n``-th power and inverted with an FFT whose period is
    at least twice the span of the sum's support.
    """
    nodes = np.asarray(nodes, dtype=float)
    dx = float(nodes[1] - nodes[0])
    lo, hi = tm.support
    span = n * (hi - lo)
    m = 1 << int(math.ceil(math.log2(max(2.0 * span / dx, 2 * nodes.size))))
    idx = np.arange(m // 2 + 1)
    zeta = 2.0 * np.pi * idx / (m * dx)
    x = tm.grid.nodes
    w = tm.grid.weights * tm.values
    v = np.empty(zeta.size, dtype=complex)
    chunk = max(1, 4_000_000 // x.size)
    for s in range(0, zeta.size, chunk):
        v[s:s + chunk] = np.exp(1j * np.outer(zeta[s:s + chunk], x)) @ w
    vn = v**n
    # density at k dx = (1 / (m dx)) sum_j vn_j exp(-i zeta_j k dx); real signal
    f = np.fft.irfft(np.conj(vn), n=m) / dx
    k = np.rint(nodes / dx).astype(np.int64)
    if np.max(np.abs(nodes - k * dx)) > 1e-9 * dx:
        raise ValueError("nodes must lie on the lattice k * spacing")
    return f[k % m]


# -- Edgeworth expansion --------------------------------------------------

VARIANTS = ("verbatim", "hermite6")


@dataclass(frozen=True)
class EdgeworthCoeffs:
    sigma: float
    m3: float
    m4: float
    n: int

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.m4 < self.sigma**4 * (1 - 1e-12):
            raise ValueError("m4 must be at least sigma^4")

    @classmethod
    def from_measure(cls, tm: TiltedMeasure, n: int) -> "EdgeworthCoeffs":
        return cls(tm.sigma, tm.m3, tm.m4, n)

    @property
    def skew(self) -> float:
        return self.m3 / self.sigma**3

    @property
    def excess(self) -> float:
        return (self.m4 - 3.0 * self.sigma**4) / self.sigma**4


def hermite3(z):
    return z**3 - 3 * z


def hermite4(z):
    return z**4 - 6 * z**2 + 3


def hermite6(z):
    z2 = z * z
    return z2**3 - 15 * z2**2 + 45 * z2 - 15


def edgeworth_density(coeffs: EdgeworthCoeffs, z, variant: str = "verbatim"):
    """Two-term Edgeworth approximation of the normalised density of the sum.

    ``variant="verbatim"`` multiplies the squared-skewness term by ``z^3 - 3z``;
    ``variant="hermite6"`` uses the classical degree-six Hermite polynomial.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown Edgeworth variant {variant!r}")
    z = np.asarray(z, dtype=float)
    k3 = coeffs.skew
    p3 = k3 / 6.0 * hermite3(z)
    sq = hermite3(z) if variant == "verbatim" else hermite6(z)
    p4 = k3**2 / 72.0 * sq + coeffs.excess / 24.0 * hermite4(z)
    n = coeffs.n
    return np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi) * (1.0 + p3 / math.sqrt(n) + p4 / n)


@dataclass
class ScalingReport:
    n: np.ndarray
    errors: np.ndarray
    slope: float
    prefactor: float          # max_n error * n^{3/2}
    resolution: int
    label: str = ""

    def to_rows(self):
        return [{"n": int(n), "sup_error": float(e), "fitted_slope": self.slope,
                 "resolution": self.resolution} for n, e in zip(self.n, self.errors)]


def fit_slope(n, err) -> float:
    n = np.asarray(n, dtype=float)
    err = np.asarray(err, dtype=float)
    if n.size < 2:
        return math.nan
    return float(np.polyfit(np.log(n), np.log(err), 1)[0])


def edgeworth_error(tm: TiltedMeasure, n: int, resolution: int = DEFAULT_RESOLUTION,
                    variant: str = "verbatim", cd: Optional[ConvolvedDensity] = None) -> float:
    """Sup over lattice nodes of ``|F_n(z) - edgeworth(z)|``."""
    cd = cd if cd is not None else convolve_density(tm, n, resolution)
    z, f = cd.normalized_on_nodes()
    return float(np.max(np.abs(f - edgeworth_density(EdgeworthCoeffs.from_measure(tm, n), z, variant))))


def verify_edgeworth_scaling(tm: TiltedMeasure, n_list: Sequence[int],
                             resolution: int = DEFAULT_RESOLUTION,
                             variants: Sequence[str] = VARIANTS) -> dict:
    """Error of the expansion against the convolved density for each ``n``.

    Returns one :class:`ScalingReport` per variant.
    """
    n_arr = np.asarray(sorted(n_list), dtype=int)
    powers = {int(n): convolve_density(tm, int(n), resolution) for n in n_arr}
    out = {}
    for var in variants:
        err = np.array([edgeworth_error(tm, int(n), resolution, var, powers[int(n)]) for n in n_arr])
        out[var] = ScalingReport(n_arr, err, fit_slope(n_arr, err),
                                 float(np.max(err * n_arr**1.5)), resolution, var)
    return out


# -- marginal and pair kernel -------------------------------------------------


@dataclass(frozen=True)
class CanonicalLattice:
    """Lattice model of the pair ``(x_1, x_2)`` under the canonical measure.

    ``h`` is the single-site probability vector on nodes ``k * spacing``,
    ``k = k0 .. k0 + len(h) - 1``; ``p_m`` is the law of a sum of ``m`` sites.
    """

    n: int
    rho: float
    sigma: float
    h: LatticePMF
    p_nm2: Optional[LatticePMF]      # sum of n - 2 sites (None when n == 2)
    p_nm1: LatticePMF
    p_n: LatticePMF

    @property
    def xbar(self) -> np.ndarray:
        return self.h.nodes

    @property
    def spacing(self) -> float:
        return self.h.spacing

    @property
    def index(self) -> np.ndarray:
        return self.h.k0 + np.arange(self.h.pmf.size)

    def G(self, p: LatticePMF, k) -> np.ndarray:
        """``G_m`` at ``k * spacing``, i.e. density of the sum at ``-k * spacing``."""
        return p.at_index(-np.asarray(k)) / self.spacing

    def g0(self) -> float:
        """``G_n(0)``."""
        return float(self.G(self.p_n, 0))


def canonical_lattice(tm: TiltedMeasure, n: int, resolution: int = DEFAULT_RESOLUTION,
                      spacing: Optional[float] = None, offset: float = 0.0) -> CanonicalLattice:
    """Build ``h``, ``p_{n-2}``, ``p_{n-1}``, ``p_n`` on a common lattice.

    ``p_{n-1}`` and ``p_n`` are obtained from ``p_{n-2}`` by further convolution
    with ``h`` without renormalising, so every marginal of the discrete pair law
    is exactly consistent.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    d = spacing if spacing is not None else lattice_spacing(tm, resolution)
    h = sample_lattice(tm, d, offset)
    p_nm2 = pmf_power(h, n - 2) if n > 2 else None
    p_nm1 = convolve_pmf(p_nm2, h) if p_nm2 is not None else h
    p_n = convolve_pmf(p_nm1, h)
    return CanonicalLattice(n, tm.rho, tm.sigma, h, p_nm2, p_nm1, p_n)


@dataclass(frozen=True)
class MarginalDensity(DensityGrid):
    """One-site marginal ``g`` together with its companion checks."""

    ratio_error: float = math.nan       # sup |G_{n-1}(x)/G_n(0) - exp(-x^2/(2 sigma^2 (n-1)))|
    dominance_constant: float = math.nan  # max g / h over the grid
    rho: float = math.nan


def marginal_density(tm: TiltedMeasure, n: int, resolution: int = DEFAULT_RESOLUTION,
                     lattice: Optional[CanonicalLattice] = None) -> MarginalDensity:
    """``g(x) = h(x - rho) G_{n-1}(x - rho) / G_n(0)`` on the lattice nodes ``x``.

    Raises
    ------
    RuntimeError
        If ``G_n(0) < 1e-300``.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    cl = lattice if lattice is not None else canonical_lattice(tm, n, resolution)
    g0 = cl.g0()
    if g0 < 1e-300:
        raise RuntimeError("G_n(0) below 1e-300; degenerate lattice")
    k = cl.index
    ratio = cl.G(cl.p_nm1, k) / g0
    hden = cl.h.density
    g = hden * ratio
    xb = cl.xbar
    gauss = np.exp(-xb**2 / (2 * tm.sigma2 * (n - 1)))
    return MarginalDensity(nodes=tm.rho + xb, values=g,
                           ratio_error=float(np.max(np.abs(ratio - gauss))),
                           dominance_constant=float(np.max(ratio)), rho=tm.rho)


@dataclass(frozen=True)
class PairKernel:
    """Joint law of ``(x_1, x_2)`` and the kernel ``Q`` on the single-site lattice.

    ``joint[i, j]`` is the probability of the lattice cell ``(x_i, x_j)``;
    ``marginal`` is the density ``g`` at the nodes ``x = rho + xbar``.
    """

    n: int
    rho: float
    sigma: float
    xbar: np.ndarray
    marginal: np.ndarray
    joint: np.ndarray
    log1p_q: np.ndarray

    @property
    def spacing(self) -> float:
        return float(self.xbar[1] - self.xbar[0])

    @property
    def grid_x(self) -> np.ndarray:
        return self.rho + self.xbar

    grid_y = grid_x

    @property
    def q_values(self) -> np.ndarray:
        return np.expm1(self.log1p_q)

    @property
    def marginal_pmf(self) -> np.ndarray:
        return self.joint.sum(axis=1)

    def margin_residual(self) -> float:
        """Max over ``x`` of ``|sum_y g(y) Q(x, y) dy|``."""
        w = self.marginal_pmf
        return float(np.max(np.abs(self.q_values @ w)))

    def symmetry_residual(self) -> float:
        q = self.q_values
        return float(np.max(np.abs(q - q.T)))

    def in_ball(self, B: float) -> np.ndarray:
        a = np.abs(self.xbar)
        return (a[:, None] + a[None, :]) <= B * self.sigma * math.log(self.n)


def pair_kernel(tm: TiltedMeasure, n: int, resolution: int = DEFAULT_RESOLUTION,
                lattice: Optional[CanonicalLattice] = None) -> PairKernel:
    """Pair density and ``Q`` computed in log space.

    Raises
    ------
    RuntimeError
        On non-finite entries.
    """
    if n < 3:
        raise ValueError("n must be >= 3")
    cl = lattice if lattice is not None else canonical_lattice(tm, n, resolution)
    k = cl.index
    kk = k[:, None] + k[None, :]
    p2 = cl.p_nm2.at_index(-kk)
    hp = cl.h.pmf
    joint = hp[:, None] * hp[None, :] * p2 / cl.p_n.at_index(0)
    with np.errstate(divide="ignore"):
        l2 = np.log(p2)
        l1 = np.log(cl.p_nm1.at_index(-k))
    log1p_q = l2 + math.log(float(cl.p_n.at_index(0))) - l1[:, None] - l1[None, :]
    if np.any(np.isnan(log1p_q)) or np.any(np.isposinf(log1p_q)) or not np.all(np.isfinite(l1)):
        raise RuntimeError("non-finite entries in the pair kernel")
    marginal = hp * cl.p_nm1.at_index(-k) / cl.p_n.at_index(0) / cl.spacing
    return PairKernel(n, tm.rho, tm.sigma, cl.xbar, marginal, joint, log1p_q)


def kernel_expansion_error(pk: PairKernel, B: float = DEFAULT_B) -> float:
    """Sup over the ball of ``|Q + xbar ybar / (sigma^2 n)|``."""
    xb = pk.xbar
    dev = pk.q_values + np.outer(xb, xb) / (pk.sigma**2 * pk.n)
    mask = pk.in_ball(B)
    return float(np.max(np.abs(dev[mask]))) if mask.any() else 0.0


@dataclass
class KernelExpansionReport(ScalingReport):
    discretization: np.ndarray = field(default_factory=lambda: np.zeros(0))
    excluded: list = field(default_factory=list)
    B: float = DEFAULT_B
    warnings: list = field(default_factory=list)


def _coarse_error(tm, n, resolution, B, fine: PairKernel) -> float:
    coarse = pair_kernel(tm, n, lattice=canonical_lattice(tm, n, spacing=2 * fine.spacing))
    # coarse nodes are every other fine node
    pos = np.rint(coarse.xbar / fine.spacing).astype(int)
    fpos = np.rint(fine.xbar / fine.spacing).astype(int)
    sel = np.searchsorted(fpos, pos)
    ok = (sel < fpos.size) & (fpos[np.minimum(sel, fpos.size - 1)] == pos)
    sel, cidx = sel[ok], np.flatnonzero(ok)
    qf = fine.q_values[np.ix_(sel, sel)]
    qc = coarse.q_values[np.ix_(cidx, cidx)]
    mask = fine.in_ball(B)[np.ix_(sel, sel)]
    return float(np.max(np.abs(qf - qc)[mask])) if mask.any() else 0.0


def verify_kernel_expansion(tm: TiltedMeasure, n_list: Sequence[int], B: float = DEFAULT_B,
                            resolution: int = DEFAULT_RESOLUTION, n_min_fit: int = 8) -> KernelExpansionReport:
    """``E(n)`` over the ball ``|xbar| + |ybar| <= B sigma log n`` and its log-log slope.

    The ball is intersected with the single-site support.  Sizes below
    ``n_min_fit`` are evaluated but excluded from the fit.
    """
    if B <= 0:
        raise ValueError("B must be positive")
    n_arr = np.asarray(sorted(n_list), dtype=int)
    if np.any(n_arr < 3):
        raise ValueError("each n must be >= 3")
    errs, disc, notes = [], [], []
    for n in n_arr:
        pk = pair_kernel(tm, int(n), resolution)
        e = kernel_expansion_error(pk, B)
        d = _coarse_error(tm, int(n), resolution, B, pk)
        if e < 10 * d:
            notes.append(f"n={n}: E={e:.3g} within 10x of discretisation error {d:.3g}")
            warnings.warn(notes[-1])
        errs.append(e)
        disc.append(d)
    errs = np.array(errs)
    use = n_arr >= n_min_fit
    slope = fit_slope(n_arr[use], errs[use])
    pref = float(np.max(errs[use] * n_arr[use] ** 1.5)) if use.any() else math.nan
    return KernelExpansionReport(n_arr, errs, slope, pref, resolution, "kernel",
                                 discretization=np.array(disc),
                                 excluded=[int(n) for n in n_arr[~use]], B=B, warnings=notes)


def tail_operator_norm(tm: TiltedMeasure, n: int, B: float = DEFAULT_B,
                       resolution: int = DEFAULT_RESOLUTION, pk: Optional[PairKernel] = None):
    """Sharp constant of the pair density restricted to the complement of the ball.

    Returns ``(norm, norm * n^{3/2})``; the norm is the top eigenvalue of the
    masked joint law in the marginal-weighted inner product.
    """
    pk = pk if pk is not None else pair_kernel(tm, n, resolution)
    w = pk.marginal_pmf
    mask = ~pk.in_ball(B)
    if not mask.any():
        return 0.0, 0.0
    s = np.sqrt(np.maximum(w, TINY))
    m = np.where(mask, pk.joint, 0.0) / np.outer(s, s)
    val = float(np.max(np.abs(np.linalg.eigvalsh(0.5 * (m + m.T)))))
    return val, val * n**1.5
