"""Single-site potentials ``V = phi + psi`` and class certification.

``phi`` is drawn from a small set of convex parametric families and ``psi``
from a set of bounded perturbations.  Everything is vectorised over ``x``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from numpy.polynomial import polynomial as npoly

PHI_FAMILIES = ("quadratic", "quartic", "polynomial", "smoothed_power")
PSI_FAMILIES = ("zero", "cos", "bump")


def _poly_coeffs(family: str, params: Sequence[float]) -> np.ndarray:
    if family == "quadratic":
        (a,) = params
        return np.array([0.0, 0.0, a])
    if family == "quartic":
        a, b = params
        return np.array([0.0, 0.0, a, 0.0, b])
    return npoly.polytrim(np.asarray(params, dtype=float))


@lru_cache(maxsize=256)
def _derivative_coeffs(family: str, params: tuple, order: int) -> tuple:
    c = _poly_coeffs(family, params)
    return tuple(npoly.polyder(c, order) if order else c)


def _horner(c: tuple, x: np.ndarray) -> np.ndarray:
    out = np.full(x.shape, c[-1])
    for ci in c[-2::-1]:
        out *= x
        if ci:
            out += ci
    return out


def _smoothed_power(x: np.ndarray, alpha: float, eps: float, order: int) -> np.ndarray:
    # |x|^p outside [-eps, eps]; inside, the even quartic A + B x^2 + C x^4
    # matching value, slope and curvature at +-eps (C^2 overall).
    p = 1.0 + alpha
    C = p * (p - 2.0) / 8.0 * eps ** (p - 4.0)
    B = p * (4.0 - p) / 4.0 * eps ** (p - 2.0)
    A = eps**p - B * eps**2 - C * eps**4
    ax = np.abs(x)
    inner = ax < eps
    safe = np.where(inner, eps, ax)
    if order == 0:
        out = safe**p
        patch = A + B * x**2 + C * x**4
    elif order == 1:
        out = np.sign(x) * p * safe ** (p - 1.0)
        patch = 2.0 * B * x + 4.0 * C * x**3
    else:
        out = p * (p - 1.0) * safe ** (p - 2.0)
        patch = 2.0 * B + 12.0 * C * x**2
    return np.where(inner, patch, out)


def _bump(x: np.ndarray, a: float, width: float, center: float, order: int) -> np.ndarray:
    u = (x - center) / width
    inside = np.abs(u) < 1.0
    us = np.where(inside, u, 0.0)
    s = 1.0 - us**2
    f = a * np.exp(-1.0 / s)
    if order == 0:
        out = f
    else:
        g1 = -2.0 * us / (width * s**2)
        if order == 1:
            out = f * g1
        else:
            g2 = -2.0 / (width**2 * s**2) - 8.0 * us**2 / (width**2 * s**3)
            out = f * (g2 + g1**2)
    return np.where(inside, out, 0.0)


@dataclass(frozen=True)
class PotentialSpec:
    """A potential ``V = phi + psi`` built from enumerated families.

    Parameters
    ----------
    phi_family : str
        One of ``quadratic`` (``a x^2``), ``quartic`` (``a x^2 + b x^4``),
        ``polynomial`` (ascending coefficient list) or ``smoothed_power``
        (``|x|^(1+alpha)`` smoothed on ``[-eps, eps]``, params ``(alpha, eps)``).
    phi_params : tuple of float
    psi_family : str
        ``zero``, ``cos`` (params ``(a, omega)``: ``a cos(omega x)``) or
        ``bump`` (params ``(a, width[, center])``, compactly supported).
    psi_params : tuple of float
    delta, beta_plus, beta_minus, psi_sup, psi_d1_sup, psi_d2_sup : float, optional
        Declared class constants.  Left as ``None`` they are derived from
        the family parameters.
    growth_c : float, optional
        Declared constant for the polynomial-growth condition.  When unset
        the certification only reports the observed ratios.
    """

    phi_family: str = "quadratic"
    phi_params: tuple = (0.5,)
    psi_family: str = "zero"
    psi_params: tuple = ()
    delta: Optional[float] = None
    beta_plus: Optional[float] = None
    beta_minus: Optional[float] = None
    psi_sup: Optional[float] = None
    psi_d1_sup: Optional[float] = None
    psi_d2_sup: Optional[float] = None
    growth_c: Optional[float] = None

    def __post_init__(self):
        if self.phi_family not in PHI_FAMILIES:
            raise ValueError(f"unknown phi family {self.phi_family!r}")
        if self.psi_family not in PSI_FAMILIES:
            raise ValueError(f"unknown psi family {self.psi_family!r}")
        object.__setattr__(self, "phi_params", tuple(float(p) for p in self.phi_params))
        object.__setattr__(self, "psi_params", tuple(float(p) for p in self.psi_params))
        self._check_params()
        if self.delta is None:
            object.__setattr__(self, "delta", self._derived_delta())
        if self.beta_plus is None or self.beta_minus is None:
            beta = self._derived_beta()
            if self.beta_plus is None:
                object.__setattr__(self, "beta_plus", beta)
            if self.beta_minus is None:
                object.__setattr__(self, "beta_minus", beta)
        sups = self._derived_psi_sups()
        for name, value in zip(("psi_sup", "psi_d1_sup", "psi_d2_sup"), sups):
            if getattr(self, name) is None:
                object.__setattr__(self, name, value)

    def _check_params(self):
        n = len(self.phi_params)
        fam = self.phi_family
        if fam == "quadratic" and (n != 1 or self.phi_params[0] <= 0):
            raise ValueError("quadratic family takes a single positive coefficient a")
        if fam == "quartic" and (n != 2 or self.phi_params[0] < 0 or self.phi_params[1] < 0
                                 or sum(self.phi_params) == 0):
            raise ValueError("quartic family takes (a, b) with a, b >= 0, not both zero")
        if fam == "polynomial":
            if n < 3 or (n - 1) % 2 or self.phi_params[-1] <= 0:
                raise ValueError("polynomial family needs an even degree >= 2 and positive leading coefficient")
        if fam == "smoothed_power":
            if n != 2 or not (0.0 <= self.phi_params[0] < 1.0) or self.phi_params[1] <= 0:
                raise ValueError("smoothed_power takes (alpha, eps) with 0 <= alpha < 1 and eps > 0")
        m = len(self.psi_params)
        if self.psi_family == "zero" and m:
            raise ValueError("zero psi takes no parameters")
        if self.psi_family == "cos" and m != 2:
            raise ValueError("cos psi takes (a, omega)")
        if self.psi_family == "bump" and (m not in (2, 3) or self.psi_params[1] <= 0):
            raise ValueError("bump psi takes (a, width[, center]) with width > 0")

    # -- derived constants -------------------------------------------------

    def _derived_delta(self) -> float:
        if self.phi_family == "smoothed_power":
            return 0.0
        d2 = npoly.polytrim(npoly.polyder(_poly_coeffs(self.phi_family, self.phi_params), 2))
        if len(d2) == 1:
            return float(d2[0])
        crit = npoly.polyroots(npoly.polyder(d2)) if len(d2) > 2 else np.array([])
        crit = crit[np.abs(crit.imag) < 1e-12].real
        cand = np.concatenate([crit, [0.0]])
        return float(np.min(npoly.polyval(cand, d2)))

    def _derived_beta(self) -> float:
        if self.phi_family == "smoothed_power":
            return 0.0
        c = npoly.polytrim(_poly_coeffs(self.phi_family, self.phi_params))
        return float(max(len(c) - 3, 0))

    def _derived_psi_sups(self) -> tuple:
        if self.psi_family == "zero":
            return 0.0, 0.0, 0.0
        if self.psi_family == "cos":
            a, w = self.psi_params
            return abs(a), abs(a * w), abs(a * w * w)
        a, width = self.psi_params[:2]
        u = np.linspace(-width, width, 20001) + self.bump_center
        return tuple(float(np.max(np.abs(self.psi(u, k)))) for k in range(3))

    @property
    def bump_center(self) -> float:
        return self.psi_params[2] if len(self.psi_params) == 3 else 0.0

    # -- evaluation --------------------------------------------------------

    def phi(self, x, order: int = 0):
        """Convex part and its first two derivatives."""
        _check_order(order)
        xa = np.asarray(x, dtype=float)
        if self.phi_family == "smoothed_power":
            out = _smoothed_power(xa, self.phi_params[0], self.phi_params[1], order)
        else:
            out = _horner(_derivative_coeffs(self.phi_family, tuple(self.phi_params), order), xa)
        return out if np.ndim(out) else float(out)

    def psi(self, x, order: int = 0):
        """Bounded perturbation and its first two derivatives."""
        _check_order(order)
        xa = np.asarray(x, dtype=float)
        if self.psi_family == "zero":
            return np.zeros_like(xa) if xa.ndim else 0.0
        elif self.psi_family == "cos":
            a, w = self.psi_params
            out = a * w**order * (np.cos(w * xa) if order % 2 == 0 else -np.sin(w * xa))
            if order == 2:
                out = -out
        else:
            a, width = self.psi_params[:2]
            out = _bump(xa, a, width, self.bump_center, order)
        return out if np.ndim(out) else float(out)

    def eval(self, x, order: int = 0):
        """``V``, ``V'`` or ``V''`` at ``x``."""
        if self.psi_family == "zero":
            return self.phi(x, order)
        return self.phi(x, order) + self.psi(x, order)

    def convex_part(self) -> "PotentialSpec":
        """The same spec with ``psi`` removed."""
        return replace(self, psi_family="zero", psi_params=(), psi_sup=None,
                       psi_d1_sup=None, psi_d2_sup=None)

    @property
    def is_quadratic(self) -> bool:
        return self.phi_family == "quadratic" and self.psi_family == "zero"

    @property
    def is_even(self) -> bool:
        if self.psi_family == "bump" and self.bump_center != 0.0:
            return False
        if self.phi_family == "polynomial":
            return not np.any(np.asarray(self.phi_params)[1::2])
        return True

    def to_dict(self) -> dict:
        return {
            "phi_family": self.phi_family, "phi_params": list(self.phi_params),
            "psi_family": self.psi_family, "psi_params": list(self.psi_params),
            "delta": self.delta, "beta_plus": self.beta_plus, "beta_minus": self.beta_minus,
            "psi_sup": self.psi_sup, "psi_d1_sup": self.psi_d1_sup, "psi_d2_sup": self.psi_d2_sup,
            "growth_c": self.growth_c,
        }


def _check_order(order):
    if order not in (0, 1, 2):
        raise ValueError(f"derivative order must be 0, 1 or 2, got {order!r}")


def evaluate(pot: PotentialSpec, x, order: int = 0):
    return pot.eval(x, order)


def gaussian(a: float = 0.5) -> PotentialSpec:
    """``V = a x^2``."""
    return PotentialSpec("quadratic", (a,))


def quartic(a: float = 0.5, b: float = 1.0 / 12.0, cos_amplitude: float = 0.0,
            omega: float = 1.0) -> PotentialSpec:
    """``V = a x^2 + b x^4 + cos_amplitude * cos(omega x)``."""
    if cos_amplitude:
        return PotentialSpec("quartic", (a, b), "cos", (cos_amplitude, omega))
    return PotentialSpec("quartic", (a, b))


def smoothed_power(alpha: float = 0.5, eps: float = 0.1) -> PotentialSpec:
    return PotentialSpec("smoothed_power", (alpha, eps))


@dataclass
class ClassReport:
    observed_delta: float
    ratio_plus: float
    ratio_minus: float
    psi_sup: float
    psi_d1_sup: float
    psi_d2_sup: float
    phi_member: bool
    psi_member: bool
    declared: dict = field(default_factory=dict)


def certify_classes(pot: PotentialSpec, grid_halfwidth: float = 100.0,
                    grid_points: int = 20001) -> ClassReport:
    """Scan a symmetric grid and check the convexity/growth/boundedness claims.

    The growth limits are proxied by the ratios ``phi''(+-H) / H^beta`` at the
    grid extremes ``+-H``.
    """
    if grid_points < 2:
        raise ValueError("grid_points must be >= 2")
    if grid_halfwidth <= 0:
        raise ValueError("grid_halfwidth must be positive")
    x = np.linspace(-grid_halfwidth, grid_halfwidth, grid_points)
    d2 = pot.phi(x, 2)
    h = grid_halfwidth
    ratio_plus = float(d2[-1] / h**pot.beta_plus)
    ratio_minus = float(d2[0] / h**pot.beta_minus)
    sups = [float(np.max(np.abs(pot.psi(x, k)))) for k in range(3)]
    observed_delta = float(np.min(d2))

    ratios_ok = all(np.isfinite(r) and r > 0 for r in (ratio_plus, ratio_minus))
    if pot.growth_c is not None:
        c = pot.growth_c
        ratios_ok = ratios_ok and all(1.0 / c <= r <= c for r in (ratio_plus, ratio_minus))
    phi_member = bool(pot.delta > 0 and observed_delta >= pot.delta * (1 - 1e-12) and ratios_ok)
    declared = (pot.psi_sup, pot.psi_d1_sup, pot.psi_d2_sup)
    psi_member = all(s <= d * (1 + 1e-9) + 1e-12 for s, d in zip(sups, declared))
    return ClassReport(observed_delta, ratio_plus, ratio_minus, *sups,
                       phi_member=phi_member, psi_member=psi_member,
                       declared=pot.to_dict())
