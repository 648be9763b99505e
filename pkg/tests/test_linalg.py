import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bpt.errors import ConvergenceError, NotPSDError, ShapeError
from bpt.linalg import inv_sqrt_psd, matmul, sym_eig, transpose
from bpt import linalg

from conftest import random_spd


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_transpose_roundtrip():
    a = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(transpose(transpose(a)), a)


def test_sym_eig_diagonal_is_exact():
    r = sym_eig(np.diag([3.0, -1.0, 2.0]))
    np.testing.assert_array_equal(r.eigenvalues, [3.0, 2.0, -1.0])


def test_sym_eig_2x2_closed_form():
    # [[2, 1], [1, 2]] has eigenvalues 3 and 1
    r = sym_eig(np.array([[2.0, 1.0], [1.0, 2.0]]))
    np.testing.assert_allclose(r.eigenvalues, [3.0, 1.0], atol=1e-15)
    v = r.eigenvectors[:, 0]
    np.testing.assert_allclose(np.abs(v), [2 ** -0.5, 2 ** -0.5], atol=1e-15)


def test_sym_eig_matches_lapack():
    rng = np.random.default_rng(3)
    for d in (1, 2, 5, 16, 33):
        a = rng.standard_normal((d, d))
        a = a + a.T
        r = sym_eig(a)
        np.testing.assert_allclose(r.eigenvalues, np.sort(np.linalg.eigvalsh(a))[::-1], atol=1e-12)
        np.testing.assert_allclose(r.eigenvectors.T @ r.eigenvectors, np.eye(d), atol=1e-12)
        recon = (r.eigenvectors * r.eigenvalues) @ r.eigenvectors.T
        np.testing.assert_allclose(recon, a, atol=1e-12)


def test_sym_eig_rejects_asymmetric():
    with pytest.raises(ShapeError):
        sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_sym_eig_rejects_non_square():
    with pytest.raises(ShapeError):
        sym_eig(np.ones((2, 3)))


def test_sym_eig_sweep_cap(monkeypatch):
    monkeypatch.setattr(linalg, "MAX_SWEEPS", 0)
    with pytest.raises(ConvergenceError):
        sym_eig(np.array([[2.0, 1.0], [1.0, 2.0]]))


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=1, max_value=12), st.integers(min_value=0, max_value=2**31))
def test_sym_eig_trace_and_orthonormality(d, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((d, d))
    a = a + a.T
    r = sym_eig(a)
    assert np.all(np.diff(r.eigenvalues) <= 0)
    np.testing.assert_allclose(r.eigenvalues.sum(), np.trace(a), atol=1e-10)
    np.testing.assert_allclose(r.eigenvectors @ r.eigenvectors.T, np.eye(d), atol=1e-12)


def test_inv_sqrt_whitens_exactly():
    rng = np.random.default_rng(0)
    s = random_spd(rng, 8, 1e4)
    w = inv_sqrt_psd(s, eps=0.0)
    np.testing.assert_allclose(w @ s @ w.T, np.eye(8), atol=1e-9)
    np.testing.assert_array_equal(w, w.T)


def test_inv_sqrt_of_identity_scaled():
    np.testing.assert_allclose(inv_sqrt_psd(4.0 * np.eye(3), eps=0.0), 0.5 * np.eye(3), atol=1e-15)


def test_inv_sqrt_rejects_indefinite():
    with pytest.raises(NotPSDError):
        inv_sqrt_psd(np.diag([1.0, -1.0]))


def test_inv_sqrt_singular_needs_eps():
    s = np.diag([1.0, 0.0])
    with pytest.raises(NotPSDError):
        inv_sqrt_psd(s, eps=0.0)
    w = inv_sqrt_psd(s, eps=1e-2)
    np.testing.assert_allclose(np.diag(w), [1 / np.sqrt(1.01), 10.0])


def test_default_eps_is_relative():
    assert linalg.default_eps(np.diag([200.0, 1.0])) == pytest.approx(2e-3)
