"""Ginzburg-Landau bond form on the cube ``{1..L}^d``, staircase paths and
the comparison between the bond form and the full-gradient form.

Bonds are unordered nearest-neighbour pairs stored once, oriented in the
positive coordinate direction; the bond form is
``sum_b nu[(d_y F - d_x F)^2]`` over those pairs.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .gap import (GapEstimate, SelfCheckError, _checked_inverse_gap, exact_gap_small_n,
                  nzero_bound, tangent_basis)
from .potential import PotentialSpec

logger = logging.getLogger(__name__)


class EmptyDirichletForm(ValueError):
    pass


@dataclass(frozen=True)
class Lattice:
    d: int
    l: int

    def __post_init__(self):
        if self.d < 1 or self.l < 1:
            raise ValueError("d and L must be >= 1")

    @property
    def size(self) -> int:
        return self.l**self.d

    @property
    def sites(self) -> np.ndarray:
        """``(L^d, d)`` array of coordinates in ``{1..L}``, row-major order."""
        g = np.indices((self.l,) * self.d).reshape(self.d, -1).T
        return g + 1

    def index(self, coords) -> np.ndarray:
        c = np.asarray(coords) - 1
        return np.ravel_multi_index(tuple(np.moveaxis(c, -1, 0)), (self.l,) * self.d)

    @property
    def bonds(self) -> np.ndarray:
        """``(B, 2)`` site-index pairs ``(x, x + e)`` with ``e`` a positive unit vector."""
        s = self.sites
        out = []
        for k in range(self.d):
            ok = s[:, k] < self.l
            a = s[ok]
            b = a.copy()
            b[:, k] += 1
            out.append(np.column_stack([self.index(a), self.index(b)]))
        return np.concatenate(out) if out else np.zeros((0, 2), dtype=int)

    def laplacian(self) -> np.ndarray:
        n = self.size
        lap = np.zeros((n, n))
        for a, b in self.bonds:
            lap[a, a] += 1
            lap[b, b] += 1
            lap[a, b] -= 1
            lap[b, a] -= 1
        return lap


def staircase_points(x, y) -> list:
    """Corners ``x^(0) = x, ..., x^(d) = y`` of the axis-by-axis rule."""
    x = tuple(int(v) for v in x)
    y = tuple(int(v) for v in y)
    d = len(x)
    return [tuple(y[:i]) + tuple(x[i:]) for i in range(d + 1)]


def staircase_path(x, y) -> list:
    """Sequence of oriented steps ``(from, to)`` (coordinates) from ``x`` to ``y``."""
    pts = staircase_points(x, y)
    steps = []
    for i in range(len(x)):
        a, b = pts[i], pts[i + 1]
        cur = list(a)
        inc = 1 if b[i] > a[i] else -1
        while cur[i] != b[i]:
            nxt = list(cur)
            nxt[i] += inc
            steps.append((tuple(cur), tuple(nxt)))
            cur = nxt
    return steps


@dataclass
class PathTable:
    """Staircase paths between every ordered pair of sites.

    Paths are generated on demand by :meth:`path`; ``congestion[b]`` counts
    the ordered pairs whose path crosses bond ``b`` (indexed as ``lattice.bonds``).
    """

    lattice: Lattice
    max_length: int
    congestion: np.ndarray
    bond_index: dict = field(repr=False)

    def path(self, x, y) -> list:
        return staircase_path(x, y)

    def path_bonds(self, x, y) -> list:
        """Bond indices along the path (unordered lookup)."""
        out = []
        for a, b in self.path(x, y):
            ia, ib = int(self.lattice.index(a)), int(self.lattice.index(b))
            out.append(self.bond_index[(min(ia, ib), max(ia, ib))])
        return out

    def pairs(self) -> Iterator:
        s = [tuple(v) for v in self.lattice.sites]
        return itertools.product(s, s)


def _enumerate_congestion(lat: Lattice) -> np.ndarray:
    """Count, for every bond, the ordered pairs whose staircase path crosses it.

    Vectorised over all ``L^{2d}`` ordered pairs, one axis segment at a time.
    """
    bonds = lat.bonds
    counts = np.zeros(len(bonds), dtype=np.int64)
    if len(bonds) == 0:
        return counts
    lookup = {}
    for i, (a, b) in enumerate(bonds):
        lookup[(int(a), int(b))] = i
    # bond id table indexed by (lower site index, axis)
    table = np.full((lat.size, lat.d), -1, dtype=np.int64)
    s = lat.sites
    for k in range(lat.d):
        ok = s[:, k] < lat.l
        a = s[ok]
        b = a.copy()
        b[:, k] += 1
        ia, ib = lat.index(a), lat.index(b)
        table[ia, k] = [lookup[(int(u), int(v))] for u, v in zip(ia, ib)]
    n = lat.size
    X = np.repeat(s, n, axis=0)
    Y = np.tile(s, (n, 1))
    for i in range(lat.d):
        cur = np.concatenate([Y[:, :i], X[:, i:]], axis=1)
        lo = np.minimum(X[:, i], Y[:, i])
        hi = np.maximum(X[:, i], Y[:, i])
        for t in range(1, lat.l):
            m = (lo <= t) & (t < hi)
            if not m.any():
                continue
            c = cur[m].copy()
            c[:, i] = t
            ids = table[lat.index(c), i]
            counts += np.bincount(ids, minlength=len(bonds))
    return counts


def build_paths(lat: Lattice) -> PathTable:
    bonds = lat.bonds
    index = {(int(a), int(b)): i for i, (a, b) in enumerate(bonds)}
    return PathTable(lat, lat.d * (lat.l - 1), _enumerate_congestion(lat), index)


def congestion_closed_form(d: int, l: int, t: int) -> int:
    """Ordered pairs through a bond between positions ``t`` and ``t + 1``."""
    return 2 * l ** (d - 1) * t * (l - t)


@dataclass
class PathProps:
    max_length: int
    max_congestion: int
    implied_k: float
    length_identity: bool = True

    def __iter__(self):
        return iter((self.max_length, self.max_congestion, self.implied_k))


def verify_path_props(pt: PathTable, exhaustive_lengths: bool = True) -> PathProps:
    """Exact maxima over all ordered pairs and ``k = max(len / L, cong / L^{d+1})``."""
    lat = pt.lattice
    s = lat.sites
    if lat.size == 1:
        return PathProps(0, 0, 0.0)
    lengths = np.abs(s[:, None, :] - s[None, :, :]).sum(axis=2)
    max_len = int(lengths.max())
    ident = True
    if exhaustive_lengths and lat.size <= 64:
        for x, y in pt.pairs():
            if len(pt.path(x, y)) != sum(abs(a - b) for a, b in zip(x, y)):
                ident = False
                break
    max_cong = int(pt.congestion.max()) if pt.congestion.size else 0
    k = max(max_len / lat.l, max_cong / lat.l ** (lat.d + 1))
    return PathProps(max_len, max_cong, k, ident)


def path_is_valid(lat: Lattice, x, y, steps) -> bool:
    """Consecutive steps share endpoints, each step is a lattice bond, ends match."""
    if not steps:
        return tuple(x) == tuple(y)
    if steps[0][0] != tuple(x) or steps[-1][1] != tuple(y):
        return False
    for (a, b), (c, _) in zip(steps, steps[1:]):
        if b != c:
            return False
    for a, b in steps:
        diff = np.abs(np.subtract(a, b))
        if diff.sum() != 1 or min(min(a), min(b)) < 1 or max(max(a), max(b)) > lat.l:
            return False
    return True


def bond_gradient(grad: np.ndarray, a: int, b: int) -> np.ndarray:
    """``d_b F - d_a F`` for the oriented step ``a -> b`` (``grad`` has sites last)."""
    return grad[..., b] - grad[..., a]


# -- inverse gaps -------------------------------------------------------------


def quadratic_gamma(pot: PotentialSpec) -> float:
    """Poincaré constant of the canonical measure for ``V = a x^2`` (any ``N``)."""
    if not pot.is_quadratic:
        raise ValueError("closed form only for the quadratic family")
    return 1.0 / (2.0 * pot.phi_params[0])


def chi_exact_small(pot: PotentialSpec, d: int, l: int, rho: float, resolution: int = 128,
                    degree: Optional[int] = None, tol: float = 1e-4) -> GapEstimate:
    """Inverse spectral gap of the bond form.

    Quadratic potentials reduce to the graph Laplacian of the cube (any ``L``);
    other potentials use the slice eigenproblem with ``d = 1`` and ``L <= 3``.
    """
    lat = Lattice(d, l)
    if len(lat.bonds) == 0:
        raise EmptyDirichletForm("empty Dirichlet form")
    lap = lat.laplacian()
    if pot.is_quadratic:
        ev = np.linalg.eigvalsh(lap)
        lam1 = float(ev[1])
        chi = 1.0 / (2.0 * pot.phi_params[0] * lam1)
        return GapEstimate(lat.size, float(rho), chi, kind="gl_chi", detail={"laplacian_gap": lam1})
    if d != 1 or l > 3:
        raise ValueError("general potentials need d = 1 and L <= 3")
    U = tangent_basis(lat.size)
    A = U.T @ lap @ U
    chi, rel = _checked_inverse_gap(pot, lat.size, rho, A, resolution, degree, tol)
    return GapEstimate(lat.size, float(rho), chi, kind="gl_chi", detail={"refinement_change": rel})


def gamma_for_size(pot: PotentialSpec, n: int, rho: float, resolution: int = 128):
    """Best available upper value of ``gamma(n, rho)`` and how it was obtained."""
    if pot.is_quadratic:
        return quadratic_gamma(pot), "closed_form"
    if n in (2, 3):
        return exact_gap_small_n(pot, n, rho, resolution).value, "exact_eigen"
    return nzero_bound(pot, n), "product_bound"


@dataclass
class ComparisonRow:
    d: int
    l: int
    rho: float
    chi: float
    gamma: float
    gamma_method: str
    k: float
    rhs: float                  # k^2 L^2 gamma
    margin: float               # rhs - chi
    ok: bool

    @property
    def chi_over_l2(self) -> float:
        return self.chi / self.l**2


def comparison_check(pot: PotentialSpec, d: int, l_list: Sequence[int], rho: float,
                     resolution: int = 128) -> list:
    """Check ``chi(L) <= k^2 L^2 gamma(L^d)`` for each ``L``; violations are reported."""
    rows = []
    for l in l_list:
        lat = Lattice(d, int(l))
        props = verify_path_props(build_paths(lat), exhaustive_lengths=False)
        chi = chi_exact_small(pot, d, int(l), rho, resolution).value
        g, how = gamma_for_size(pot, lat.size, rho, resolution)
        rhs = props.implied_k**2 * l**2 * g
        rows.append(ComparisonRow(d, int(l), float(rho), chi, g, how, props.implied_k, rhs,
                                  rhs - chi, bool(chi <= rhs)))
        if chi > rhs:
            logger.warning("comparison violated at d=%d L=%d rho=%g: chi=%g > %g", d, l, rho, chi, rhs)
    return rows
