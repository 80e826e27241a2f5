import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spingap.gl import (EmptyDirichletForm, Lattice, bond_gradient, build_paths, chi_exact_small,
                        comparison_check, congestion_closed_form, path_is_valid, staircase_path,
                        verify_path_props)
from spingap.potential import gaussian, quartic


def _brute_congestion(lat):
    """Walk every staircase path and count bond visits (slow, independent oracle)."""
    bonds = {tuple(sorted(map(int, b))): i for i, b in enumerate(lat.bonds)}
    counts = np.zeros(len(bonds), dtype=int)
    sites = [tuple(s) for s in lat.sites]
    for x, y in itertools.product(sites, sites):
        for a, b in staircase_path(x, y):
            ia, ib = int(lat.index(a)), int(lat.index(b))
            counts[bonds[(min(ia, ib), max(ia, ib))]] += 1
    return counts


def test_lattice_shape():
    lat = Lattice(2, 3)
    assert lat.sites.shape == (9, 2) and lat.sites.min() == 1 and lat.sites.max() == 3
    assert len(lat.bonds) == 12
    for a, b in lat.bonds:
        assert np.abs(lat.sites[a] - lat.sites[b]).sum() == 1


def test_straight_path_d1():
    p = staircase_path((2,), (5,))
    assert len(p) == 3 and p[0][0] == (2,) and p[-1][1] == (5,)


def test_staircase_corner_d2():
    p = staircase_path((1, 1), (3, 3))
    assert len(p) == 4
    assert p[1][1] == (3, 1)


@pytest.mark.parametrize("d,l", [(1, 6), (2, 4), (3, 3)])
def test_congestion_matches_path_walk(d, l):
    lat = Lattice(d, l)
    assert np.array_equal(build_paths(lat).congestion, _brute_congestion(lat))


def test_d2_l4_exhaustive():
    pt = build_paths(Lattice(2, 4))
    props = verify_path_props(pt)
    assert props.max_length == 6
    assert props.max_congestion == congestion_closed_form(2, 4, 2) == 32
    assert props.max_congestion <= props.implied_k * 4**3
    assert props.length_identity


@pytest.mark.parametrize("l", range(2, 9))
def test_d1_closed_form(l):
    props = verify_path_props(build_paths(Lattice(1, l)))
    assert props.max_length == l - 1
    assert props.max_congestion == 2 * (l // 2) * ((l + 1) // 2)
    assert props.implied_k <= 1.0


def test_single_site_lattice():
    props = verify_path_props(build_paths(Lattice(1, 1)))
    assert (props.max_length, props.max_congestion) == (0, 0)


def test_every_path_valid_small():
    lat = Lattice(2, 3)
    pt = build_paths(lat)
    for x, y in pt.pairs():
        assert path_is_valid(lat, x, y, pt.path(x, y))


@settings(max_examples=60, deadline=None)
@given(d=st.integers(1, 3), l=st.integers(1, 8), data=st.data())
def test_path_invariants(d, l, data):
    lat = Lattice(d, l)
    pick = st.tuples(*[st.integers(1, l)] * d)
    x, y = data.draw(pick), data.draw(pick)
    steps = staircase_path(x, y)
    assert path_is_valid(lat, x, y, steps)
    assert len(steps) == sum(abs(a - b) for a, b in zip(x, y)) <= d * (l - 1)


@settings(max_examples=40, deadline=None)
@given(l=st.integers(2, 6), d=st.integers(1, 3), seed=st.integers(0, 2**31))
def test_telescoping_identity(l, d, seed):
    lat = Lattice(d, l)
    rng = np.random.default_rng(seed)
    grad = rng.normal(size=lat.size)
    i, j = rng.integers(0, lat.size, size=2)
    x, y = tuple(lat.sites[i]), tuple(lat.sites[j])
    total = sum(bond_gradient(grad, int(lat.index(a)), int(lat.index(b))) for a, b in staircase_path(y, x))
    assert total == pytest.approx(grad[i] - grad[j], abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_bond_form_orientation_symmetry(seed):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(5, 9))
    for a, b in Lattice(2, 3).bonds:
        assert np.array_equal(bond_gradient(g, a, b) ** 2, bond_gradient(g, b, a) ** 2)


@pytest.mark.parametrize("l", range(2, 9))
def test_quadratic_chi(l):
    chi = chi_exact_small(gaussian(), 1, l, 0.0).value
    assert chi == pytest.approx(1 / (2 * (1 - math.cos(math.pi / l))), abs=1e-6)


def test_quadratic_chi_l4_value():
    assert chi_exact_small(gaussian(), 1, 4, 0.0).value == pytest.approx(1 / (2 - math.sqrt(2)), rel=1e-12)


def test_general_l2_against_quadratic_route():
    # the slice route and the Laplacian route agree for the Gaussian
    g = gaussian()
    from spingap.gap import _checked_inverse_gap, tangent_basis
    U = tangent_basis(2)
    A = U.T @ Lattice(1, 2).laplacian() @ U
    chi, _ = _checked_inverse_gap(g, 2, 0.0, A, 128, None, 1e-4)
    assert chi == pytest.approx(0.5, rel=1e-6)


def test_empty_dirichlet_form():
    with pytest.raises(EmptyDirichletForm, match="empty Dirichlet form"):
        chi_exact_small(gaussian(), 1, 1, 0.0)


def test_general_potential_limits():
    with pytest.raises(ValueError):
        chi_exact_small(quartic(), 1, 4, 0.0)


def test_comparison_gaussian():
    rows = comparison_check(gaussian(), 1, range(2, 9), 0.0)
    assert all(r.ok for r in rows)
    assert rows[0].chi == pytest.approx(0.5) and rows[0].rhs == pytest.approx(rows[0].k**2 * 4)
    assert rows[-1].chi_over_l2 == pytest.approx(1 / math.pi**2, rel=0.05)


def test_comparison_quartic_l3():
    rows = comparison_check(quartic(cos_amplitude=0.3), 1, [2, 3], 0.5)
    assert all(r.ok and r.gamma_method == "exact_eigen" for r in rows)
