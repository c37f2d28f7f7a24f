import numpy as np
import pytest

from fbmlab import kl_expansion as kl
from fbmlab.fbm_core import DomainError, TimeGrid, covariance, covariance_matrix


def _gram(n):
    x, w = np.polynomial.legendre.leggauss(64)
    t, w = 0.5 * (x + 1), 0.5 * w
    L = kl.shifted_legendre(n, t)
    return (L * w) @ L.T


def test_first_basis_functions():
    t = np.linspace(0, 1, 11)
    L = kl.shifted_legendre(2, t)
    assert np.allclose(L[0], 1.0)
    assert np.allclose(L[1], np.sqrt(12) * (0.5 - t))


def test_orthonormality():
    assert np.max(np.abs(_gram(8) - np.eye(8))) < 1e-10
    assert np.max(np.abs(_gram(12) - np.eye(12))) < 1e-10
    assert np.max(np.abs(_gram(20) - np.eye(20))) < 1e-6


def test_power_coefficients_match_recurrence():
    t = np.linspace(0, 1, 7)
    coeffs = kl.power_coefficients(6)
    L = kl.shifted_legendre(6, t)
    for k, c in enumerate(coeffs):
        assert np.allclose(np.polynomial.polynomial.polyval(t, c), L[k], atol=1e-10)
    with pytest.raises(DomainError):
        kl.power_coefficients(31)


def test_coefficients_are_gram_schmidt_of_powers_of_one_minus_t():
    # l'_k must lie in span{(1-t)^j, j < k} with positive leading coefficient in (1-t)
    for k, c in enumerate(kl.power_coefficients(5), start=1):
        poly = np.polynomial.Polynomial(c)
        in_s = poly(np.polynomial.Polynomial([1, -1]))  # substitute t = 1 - s
        assert in_s.degree() == k - 1
        assert in_s.coef[-1] > 0


def test_h_vanishes_at_zero():
    b = kl.build_basis(6, 0.7)
    assert np.all(b.h([0.0]) == 0.0)


@pytest.mark.parametrize("H", [0.3, 0.7])
def test_variance_partial_sums_increase_to_R(H):
    t = np.array([0.25, 0.5, 1.0])
    prev = np.zeros(3)
    for n in (1, 2, 4, 8, 16, 32):
        v = np.sum(kl.build_basis(n, H).h(t) ** 2, axis=0)
        assert np.all(v >= prev - 1e-12)
        assert np.all(v <= t ** (2 * H) + 1e-6)
        prev = v
    assert np.all(prev >= 0.9 * t ** (2 * H))


def test_truncation_identity_and_edges():
    b = kl.build_basis(5, 0.7, quad_steps=64)
    g = TimeGrid.regular(1.0, 64)
    tr, res, full = kl.kl_decomposition(b, g, 1, seed=4, paths=20)
    assert np.allclose(tr.values + res.values, full.values, rtol=0, atol=1e-14)
    b0 = kl.build_basis(0, 0.7, quad_steps=64)
    assert np.all(kl.truncated_fbm(b0, g, seed=4).values == 0)
    assert np.array_equal(kl.residual_fbm(b0, g, seed=4).values,
                          kl.kl_decomposition(b0, g, seed=4)[2].values)


def test_residual_variance_small_at_high_order():
    H = 0.7
    b = kl.build_basis(128, H, quad_steps=512)
    g = TimeGrid.regular(1.0, 512)
    res = kl.residual_fbm(b, g, 1, seed=2, paths=4000).values[:, 0, -1]
    assert np.mean(res ** 2) < 0.05


def test_truncated_covariance_monte_carlo():
    H = 0.7
    b = kl.build_basis(50, H, quad_steps=512)
    fine = TimeGrid.regular(1.0, 512)
    grid = TimeGrid.regular(1.0, 8)
    idx = [fine.index_of(t) for t in grid.points]
    X = kl.truncated_fbm(b, fine, 1, seed=1, paths=100000).values[:, 0][:, idx]
    R = covariance_matrix(H, grid).entries
    assert np.max(np.abs(X.T @ X / X.shape[0] - R)) <= 0.02
    exact = kl.truncated_covariance(b, grid.points)
    assert np.max(np.abs(exact - R)) < 0.01


def test_var_b1_nondecreasing_and_bounded():
    v = [np.sum(kl.build_basis(n, 0.7).h([1.0]) ** 2) for n in range(1, 10)]
    assert np.all(np.diff(v) >= -1e-12) and max(v) <= 1.0 + 1e-9
    assert covariance(0.7, 1.0, 1.0) == 1.0


def test_basis_csv(tmp_path):
    kl.write_basis_csv(tmp_path / "b.csv", kl.build_basis(4, 0.7))
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert len(lines) == 5
