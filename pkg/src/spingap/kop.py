"""The one-site conditional-expectation operator of the canonical measure.

``(K f)(x) = E[f(x_2) | x_1 = x]``.  It is stochastic and self-adjoint in
``L^2(g)``, ``g`` being the one-site marginal.  Matrices act on values at
the single-site lattice nodes.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .edgeworth import (DEFAULT_RESOLUTION, CanonicalLattice, PairKernel, canonical_lattice,
                        fit_slope, pair_kernel, pmf_power, sample_lattice)
from .single_site import TiltedMeasure, solve_chemical_potential

logger = logging.getLogger(__name__)


class CrossCheckError(RuntimeError):
    """Two independent constructions of the same object disagree."""


@dataclass(frozen=True)
class KOperator:
    """Discretised ``K`` with its weighted inner product.

    ``marginal_weights`` are the probabilities of the lattice cells under
    ``g``; ``matrix[i, j]`` is the conditional probability of cell ``j`` given
    cell ``i``.
    """

    n: int
    rho: float
    sigma: float
    xbar: np.ndarray
    marginal_weights: np.ndarray
    matrix: np.ndarray
    sym: np.ndarray                  # D^{1/2} K D^{-1/2}, exactly symmetric
    lattice: Optional[CanonicalLattice] = field(default=None, repr=False, compare=False)

    @property
    def nodes(self) -> np.ndarray:
        return self.rho + self.xbar

    @property
    def xi(self) -> np.ndarray:
        return self.xbar

    @property
    def size(self) -> int:
        return self.xbar.size

    def apply(self, f) -> np.ndarray:
        return self.matrix @ np.asarray(f, dtype=float)

    def inner(self, f, g) -> float:
        return float(np.dot(self.marginal_weights * np.asarray(f), np.asarray(g)))

    def norm(self, f) -> float:
        return math.sqrt(self.inner(f, f))

    def mean(self, f) -> float:
        return float(np.dot(self.marginal_weights, f))

    def center(self, f) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        return f - self.mean(f)

    def to_sym(self, f) -> np.ndarray:
        """Map a function to coordinates in which ``K`` is the symmetric ``sym``."""
        return np.sqrt(self.marginal_weights) * f

    def from_sym(self, v) -> np.ndarray:
        return v / np.sqrt(self.marginal_weights)

    def stochasticity_residual(self) -> float:
        return float(np.max(np.abs(self.matrix.sum(axis=1) - 1.0)))

    def adjointness_residual(self) -> float:
        """``max |<e_i, K e_j> - <K e_i, e_j>|`` over basis vectors."""
        a = self.marginal_weights[:, None] * self.matrix
        return float(np.max(np.abs(a - a.T)))

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.sym)

    def function_of(self, op) -> np.ndarray:
        """Matrix of ``op(K)`` for a scalar map ``op`` applied to the spectrum."""
        w, v = np.linalg.eigh(self.sym)
        s = (v * op(w)) @ v.T
        d = np.sqrt(self.marginal_weights)
        return s / d[:, None] * d[None, :]


def _from_pair_kernel(pk: PairKernel, cl: Optional[CanonicalLattice]) -> KOperator:
    joint = pk.joint
    pi = joint.sum(axis=1)
    if np.any(pi <= 0):
        raise RuntimeError("marginal vanishes at a lattice node")
    mat = joint / pi[:, None]
    s = np.sqrt(pi)
    sym = joint / np.outer(s, s)
    sym = 0.5 * (sym + sym.T)
    return KOperator(pk.n, pk.rho, pk.sigma, pk.xbar, pi, mat, sym, cl)


def conditional_row(tm: TiltedMeasure, n: int, xbar_i: float, spacing: float) -> tuple:
    """Law of ``x_2`` given ``x_1 = rho + xbar_i`` via the shifted density.

    Conditioning on one site leaves ``n - 1`` sites with mean
    ``rho_x = rho - xbar_i / (n - 1)``; the law of ``x_2`` is the one-site
    marginal of that smaller system.  Returns ``(lattice indices, probs)``
    relative to ``rho``.
    """
    rho_x = tm.rho - xbar_i / (n - 1)
    tx = solve_chemical_potential(tm.pot, rho_x, k_max=4)
    t = xbar_i / (n - 1)
    h = sample_lattice(tx, spacing, t)
    p = pmf_power(h, n - 2)
    k_i = int(round(xbar_i / spacing))
    j = h.k0 + np.arange(h.pmf.size)
    w = h.pmf * p.at_index(-k_i - j)
    return j, w / w.sum()


def build_k(tm: TiltedMeasure, n: int, resolution: int = DEFAULT_RESOLUTION,
            cross_check: bool = True, check_rows: int = 10, tol: float = 1e-6) -> KOperator:
    """Build ``K`` from the pair kernel.

    With ``cross_check`` the operator is compared row by row with the
    conditional-density construction at ``check_rows`` rows.

    Raises
    ------
    CrossCheckError
        If a checked row differs by more than ``tol``.
    """
    if n < 3:
        raise ValueError("n must be >= 3")
    cl = canonical_lattice(tm, n, resolution)
    k = _from_pair_kernel(pair_kernel(tm, n, lattice=cl), cl)
    if cross_check:
        diff = cross_check_rows(tm, k, check_rows)
        if diff > tol:
            raise CrossCheckError(f"K rows disagree with the conditional route by {diff:.3g}")
    return k


def cross_check_rows(tm: TiltedMeasure, k: KOperator, rows: int = 10) -> float:
    """Max absolute row difference between the two constructions."""
    pi = k.marginal_weights
    live = np.flatnonzero(pi > 1e-12 * pi.max())
    picks = live[np.linspace(0, live.size - 1, rows).round().astype(int)]
    d = k.lattice.spacing
    base = k.lattice.h.k0
    worst = 0.0
    for i in picks:
        j, w = conditional_row(tm, k.n, float(k.xbar[i]), d)
        row = np.zeros(max(j[-1], base + k.size - 1) - min(j[0], base) + 1)
        lo = min(j[0], base)
        row[j - lo] += w
        row[base - lo: base - lo + k.size] -= k.matrix[i]
        worst = max(worst, float(np.max(np.abs(row))))
    return worst


def verify_eig(k: KOperator) -> float:
    """``||K xi + xi / (n - 1)|| / ||xi||`` in the marginal-weighted norm."""
    xi = k.xi
    r = k.apply(xi) + xi / (k.n - 1)
    return k.norm(r) / k.norm(xi)


def complement_basis(k: KOperator) -> np.ndarray:
    """Orthonormal basis (symmetric coordinates) of the complement of ``{1, xi}``."""
    s = np.sqrt(k.marginal_weights)
    a = np.column_stack([s, s * k.xi])
    q, _ = np.linalg.qr(np.column_stack([a, np.eye(k.size)]))
    return q[:, 2:]


def projected_norm(k: KOperator) -> float:
    """``max |<f, K f>| / <f, f>`` over ``f`` orthogonal to ``1`` and ``xi``."""
    z = complement_basis(k)
    m = z.T @ k.sym @ z
    return float(np.max(np.abs(np.linalg.eigvalsh(0.5 * (m + m.T)))))


@dataclass
class ConfinementReport:
    n: np.ndarray
    rho: float
    projected_norm: np.ndarray
    eig_residual: np.ndarray
    top_eigs: np.ndarray       # largest eigenvalue of K (should be 1)
    low_eigs: np.ndarray       # smallest eigenvalue of K (should be -1/(n-1))
    slope: float
    prefactor: float           # max projected_norm * n^{3/2}
    monotone: bool

    def to_rows(self):
        return [{"n": int(n), "rho": self.rho, "projected_norm": float(p),
                 "eig_residual": float(r), "slope": self.slope}
                for n, p, r in zip(self.n, self.projected_norm, self.eig_residual)]


def spectral_confinement(tm: TiltedMeasure, n_list: Sequence[int],
                         resolution: int = DEFAULT_RESOLUTION, cross_check: bool = False) -> ConfinementReport:
    n_arr = np.asarray(sorted(n_list), dtype=int)
    if np.any(n_arr < 4):
        raise ValueError("each n must be >= 4")
    pn, res, top, low = [], [], [], []
    for n in n_arr:
        k = build_k(tm, int(n), resolution, cross_check=cross_check)
        pn.append(projected_norm(k))
        res.append(verify_eig(k))
        ev = k.eigenvalues()
        top.append(ev[-1])
        low.append(ev[0])
    pn = np.array(pn)
    mono = bool(np.all(pn[1:] <= pn[:-1] * 1.05))
    return ConfinementReport(n_arr, tm.rho, pn, np.array(res), np.array(top), np.array(low),
                             fit_slope(n_arr, pn), float(np.max(pn * n_arr**1.5)), mono)
