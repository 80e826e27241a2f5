import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from spingap.potential import PotentialSpec, certify_classes, gaussian, quartic, smoothed_power

FAMILIES = [
    gaussian(),
    quartic(),
    quartic(cos_amplitude=0.3),
    smoothed_power(),
    PotentialSpec("polynomial", (0.0, 0.0, 1.0, 0.0, 0.5), "bump", (0.2, 1.5)),
]


def test_quadratic_second_derivative():
    assert gaussian().eval(3.0, 2) == pytest.approx(1.0)


def test_quartic_cos_curvature_at_origin():
    assert quartic(cos_amplitude=0.3).eval(0.0, 2) == pytest.approx(0.7, abs=1e-15)


def test_smoothed_power_outside_window():
    pot = smoothed_power(0.5, 0.1)
    assert pot.eval(10.0, 2) == pytest.approx(0.75 * 10.0**-0.5, rel=1e-12)
    h = 1e-4
    fd = (pot.eval(10.0 + h, 1) - pot.eval(10.0 - h, 1)) / (2 * h)
    assert fd == pytest.approx(pot.eval(10.0, 2), abs=1e-6)


def test_smoothed_power_is_c2_at_window_edge():
    pot = smoothed_power(0.5, 0.1)
    for order in (0, 1, 2):
        a = pot.eval(0.1 - 1e-12, order)
        b = pot.eval(0.1 + 1e-12, order)
        assert abs(a - b) < 1e-8


def test_order_is_validated():
    with pytest.raises(ValueError):
        gaussian().eval(0.0, 3)


def test_certify_quadratic():
    rep = certify_classes(gaussian(), 100.0, 2001)
    assert rep.observed_delta == pytest.approx(1.0)
    assert rep.ratio_plus == pytest.approx(1.0)
    assert rep.phi_member and rep.psi_member


def test_certify_quartic_growth_ratio():
    rep = certify_classes(quartic(), 100.0, 2001)
    assert rep.ratio_plus == pytest.approx((1 + 100.0**2) / 100.0**2, rel=1e-12)


def test_certify_smoothed_power_is_not_uniformly_convex():
    rep = certify_classes(smoothed_power(), 100.0, 2001)
    assert not rep.phi_member


def test_certify_rejects_tiny_grid():
    with pytest.raises(ValueError):
        certify_classes(gaussian(), 10.0, 1)


@pytest.mark.parametrize("pot", FAMILIES, ids=lambda p: f"{p.phi_family}-{p.psi_family}")
@settings(max_examples=60, deadline=None)
@given(x=st.floats(-20, 20))
def test_gradient_check(pot, x):
    h = 1e-4
    d1 = (pot.eval(x + h) - pot.eval(x - h)) / (2 * h)
    d2 = (pot.eval(x + h, 1) - pot.eval(x - h, 1)) / (2 * h)
    scale = 1 + abs(pot.eval(x, 1)) + abs(pot.eval(x, 2))
    assert abs(d1 - pot.eval(x, 1)) < 1e-5 * scale
    if pot.phi_family == "smoothed_power":
        # V''' jumps at the patch boundary, so the difference quotient is only O(h) there
        assume(abs(abs(x) - pot.phi_params[1]) > 2 * h)
    assert abs(d2 - pot.eval(x, 2)) < 1e-5 * scale


@pytest.mark.parametrize("pot", FAMILIES[:3], ids=["gauss", "quartic", "quartic_cos"])
@settings(max_examples=40, deadline=None)
@given(x=st.floats(-50, 50))
def test_convexity_floor_and_psi_sup(pot, x):
    assert pot.phi(x, 2) >= pot.delta - 1e-12
    assert abs(pot.psi(x)) <= pot.psi_sup + 1e-15
    assert abs(pot.psi(x, 1)) <= pot.psi_d1_sup + 1e-15
    assert abs(pot.psi(x, 2)) <= pot.psi_d2_sup + 1e-15


def test_vectorised_matches_scalar():
    pot = quartic(cos_amplitude=0.3)
    x = np.linspace(-5, 5, 11)
    for order in (0, 1, 2):
        vec = pot.eval(x, order)
        assert np.allclose(vec, [pot.eval(float(v), order) for v in x], rtol=0, atol=1e-13)


def test_to_dict_roundtrip_fields():
    d = quartic(cos_amplitude=0.3).to_dict()
    assert d["psi_sup"] == pytest.approx(0.3)
    assert PotentialSpec(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}) == quartic(cos_amplitude=0.3)
