import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.polynomial import hermite_e

from spingap.kop import (CrossCheckError, build_k, complement_basis, cross_check_rows, projected_norm,
                         spectral_confinement, verify_eig)


@pytest.fixture(scope="module")
def k_gauss8(tm_gauss):
    return build_k(tm_gauss, 8)


@pytest.fixture(scope="module")
def k_quart16(tm_quart_cos3):
    return build_k(tm_quart_cos3, 16)


def test_stochastic_and_self_adjoint(k_quart16):
    assert k_quart16.stochasticity_residual() <= 1e-8
    assert k_quart16.adjointness_residual() <= 1e-8
    assert np.allclose(k_quart16.apply(np.ones(k_quart16.size)), 1.0, atol=1e-8)


@pytest.mark.parametrize("order", [1, 2, 3, 4])
def test_gaussian_mehler_action(k_gauss8, order):
    n = k_gauss8.n
    v = (n - 1) / n
    z = k_gauss8.xbar / math.sqrt(v)
    he = hermite_e.hermeval(z, [0] * order + [1])
    r = k_gauss8.apply(he) - (-1.0 / (n - 1)) ** order * he
    assert k_gauss8.norm(r) / k_gauss8.norm(he) <= 1e-8


def test_eigen_identity_gaussian(k_gauss8):
    assert verify_eig(k_gauss8) <= 1e-8


def test_eigen_identity_quartic_cos(k_quart16):
    assert verify_eig(k_quart16) <= 1e-6


def test_spectrum_in_unit_interval(k_quart16):
    ev = k_quart16.eigenvalues()
    assert ev.min() >= -1 - 1e-6 and ev.max() <= 1 + 1e-6
    assert ev[-1] == pytest.approx(1.0, abs=1e-10)
    assert np.min(np.abs(ev + 1 / 15)) <= 1e-8


def test_gaussian_projected_norm(tm_gauss):
    for n in (4, 9):
        assert projected_norm(build_k(tm_gauss, n)) * (n - 1) ** 2 == pytest.approx(1.0, rel=1e-6)


def test_complement_is_orthonormal(k_quart16):
    z = complement_basis(k_quart16)
    assert np.allclose(z.T @ z, np.eye(z.shape[1]), atol=1e-10)
    s = np.sqrt(k_quart16.marginal_weights)
    assert np.max(np.abs(z.T @ s)) < 1e-10
    assert np.max(np.abs(z.T @ (s * k_quart16.xi))) < 1e-9


def test_resolution_self_convergence(tm_quart):
    a = build_k(tm_quart, 16, 256, cross_check=False)
    b = build_k(tm_quart, 16, 512, cross_check=False)
    assert abs(projected_norm(a) - projected_norm(b)) <= 1e-6
    assert np.allclose(a.eigenvalues()[-5:], b.eigenvalues()[-5:], atol=1e-6)


def test_cross_check_agrees(tm_quart_cos3):
    k = build_k(tm_quart_cos3, 8, cross_check=False)
    assert cross_check_rows(tm_quart_cos3, k, 10) <= 1e-6


def test_cross_check_failure_aborts(tm_quart_cos3):
    with pytest.raises(CrossCheckError):
        build_k(tm_quart_cos3, 5, tol=-1.0)


def test_confinement_monotone(tm_quart):
    rep = spectral_confinement(tm_quart, [8, 16, 32])
    assert rep.monotone
    assert np.allclose(rep.top_eigs, 1.0, atol=1e-10)
    assert np.allclose(rep.low_eigs, -1 / (rep.n - 1), atol=1e-8)


def test_confinement_rejects_small_n(tm_gauss):
    with pytest.raises(ValueError):
        spectral_confinement(tm_gauss, [3, 8])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_adjointness_random_functions(k_quart16, seed):
    rng = np.random.default_rng(seed)
    f, g = rng.normal(size=(2, k_quart16.size))
    lhs = k_quart16.inner(f, k_quart16.apply(g))
    rhs = k_quart16.inner(k_quart16.apply(f), g)
    assert abs(lhs - rhs) <= 1e-10 * (1 + k_quart16.norm(f) * k_quart16.norm(g))
