import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, stats

from fbmlab import fbm_core as fc
from fbmlab.fbm_core import DomainError, HurstParam, TimeGrid


def _mp_cov(H, s, t):
    mpmath.mp.dps = 40
    H, s, t = mpmath.mpf(H), mpmath.mpf(s), mpmath.mpf(t)
    return float((t ** (2 * H) + s ** (2 * H) - abs(t - s) ** (2 * H)) / 2)


# frozen from _mp_cov with 40 digits
COV_075_05_1 = 0.5
COV_03_02_09 = 0.25606340282772394


def test_hurst_param_domain():
    with pytest.raises(DomainError):
        HurstParam(1.0)
    assert HurstParam(0.7).regime == "regular"
    assert HurstParam(0.5).regime == "brownian"
    assert HurstParam(0.3).regime == "rough"
    with pytest.raises(DomainError):
        HurstParam(0.2).require_theory()


def test_covariance_examples():
    assert fc.covariance(0.5, 0.3, 0.7) == pytest.approx(0.3, abs=1e-15)
    for H in (0.1, 0.3, 0.5, 0.9):
        assert fc.covariance(H, 1.0, 1.0) == pytest.approx(1.0, abs=1e-15)
    assert fc.covariance(0.75, 0.5, 1.0) == pytest.approx(COV_075_05_1, abs=1e-15)
    assert fc.covariance(0.3, 0.2, 0.9) == pytest.approx(COV_03_02_09, abs=1e-14)
    assert _mp_cov(0.3, 0.2, 0.9) == pytest.approx(COV_03_02_09, abs=1e-15)


def test_covariance_negative_time():
    with pytest.raises(DomainError):
        fc.covariance(0.5, -0.1, 0.2)


@given(st.floats(0.05, 0.95), st.floats(0.0, 2.0), st.floats(0.0, 2.0))
def test_covariance_symmetric_and_cauchy_schwarz(H, s, t):
    c = fc.covariance(H, s, t)
    assert c == pytest.approx(fc.covariance(H, t, s), abs=1e-14)
    assert abs(c) <= math.sqrt(s ** (2 * H) * t ** (2 * H)) + 1e-12


def test_covariance_matrix_psd():
    for H in (0.3, 0.5, 0.7):
        R = fc.covariance_matrix(H, TimeGrid.regular(1.0, 32)).entries
        assert np.allclose(np.diag(R), np.linspace(0, 1, 33) ** (2 * H))
        assert np.linalg.eigvalsh(R).min() >= -1e-9 * np.trace(R)


def test_time_grid_invariants():
    g = TimeGrid.regular(2.0, 8)
    assert g.uniform and g.steps == 8 and g.horizon == 2.0
    assert g.index_of(0.5) == 2
    with pytest.raises(DomainError):
        TimeGrid(np.array([0.0, 0.5, 0.4]))
    with pytest.raises(DomainError):
        g.index_of(0.3)


def test_volterra_kernel_brownian():
    assert fc.volterra_kernel(0.5, 0.9, 0.2) == 1.0
    assert np.all(fc.kernel_values(0.5, 1.0, np.array([0.1, 0.5, 0.99])) == 1.0)


def test_volterra_kernel_reconstructs_covariance():
    H = 0.7
    val, _ = integrate.quad(lambda r: fc.volterra_kernel(H, 1.0, r) * fc.volterra_kernel(H, 0.5, r),
                            0, 0.5, limit=200)
    assert val == pytest.approx(fc.covariance(H, 0.5, 1.0), abs=1e-4)


@pytest.mark.parametrize("H", [0.3, 0.7])
def test_kernel_closed_form_matches_quadrature(H):
    s = np.array([0.05, 0.3, 0.6, 0.95])
    closed = fc.kernel_values(H, 1.0, s)
    quad = np.array([fc.volterra_kernel(H, 1.0, v) for v in s])
    assert np.allclose(closed, quad, rtol=1e-8)


def test_rough_kernel_diverges_at_diagonal():
    H = 0.3
    eps = np.array([1e-2, 1e-4, 1e-6])
    k = fc.kernel_values(H, 1.0, 1.0 - eps)
    # K(t, s) (t - s)^{1/2 - H} tends to a finite positive limit
    scaled = k * eps ** (0.5 - H)
    assert np.all(np.diff(k) > 0)
    assert scaled[-1] == pytest.approx(scaled[-2], rel=1e-2)


def test_volterra_kernel_domain():
    with pytest.raises(DomainError):
        fc.volterra_kernel(0.7, 0.5, 0.5)


def test_kstar_identity_at_half():
    g = TimeGrid.regular(1.0, 64)
    f = np.sin(np.arange(64))
    assert np.allclose(fc.kstar_apply(0.5, g, f), f)


def test_kstar_indicator_is_kernel_column():
    H, g = 0.7, TimeGrid.regular(1.0, 64)
    t = 0.5
    u = g.midpoints[g.midpoints < t]
    out = fc.kstar_apply(H, g, fc.indicator(g, t), at=u)
    assert np.allclose(out, [fc.volterra_kernel(H, t, v) for v in u], rtol=1e-8)


@pytest.mark.parametrize("H", [0.3, 0.5, 0.7])
def test_l2_kstar_norm_of_indicator(H):
    g = TimeGrid.regular(1.0, 2048)
    f = fc.indicator(g, 0.5)
    assert fc.l2_kstar_inner(H, g, f, f) == pytest.approx(0.5 ** (2 * H), rel=0.01)


def test_h_inner_product_examples():
    g = TimeGrid.regular(1.0, 1024)
    f = fc.indicator(g, 0.5)
    assert fc.h_inner_product(0.7, g, f, f) == pytest.approx(0.5 ** 1.4, abs=1e-3)
    one = np.ones(1024)
    assert fc.h_inner_product(0.7, g, one, one) == pytest.approx(1.0, abs=1e-12)
    e1 = np.stack([one, 0 * one], axis=-1)
    e2 = np.stack([0 * one, one], axis=-1)
    assert fc.h_inner_product(0.7, g, e1, e2) == 0.0


@pytest.mark.parametrize("H", [0.3, 0.5, 0.7])
def test_h_inner_product_of_indicators_is_covariance(H):
    g = TimeGrid.regular(1.0, 64)
    for s, t in [(0.25, 0.75), (0.5, 1.0)]:
        v = fc.h_inner_product(H, g, fc.indicator(g, s), fc.indicator(g, t))
        assert v == pytest.approx(fc.covariance(H, s, t), abs=1e-12)


def test_sample_fbm_shapes_and_determinism():
    g = TimeGrid.regular(1.0, 16)
    for m in fc.METHODS:
        a = fc.sample_fbm(0.7, g, 2, seed=3, method=m)
        b = fc.sample_fbm(0.7, g, 2, seed=3, method=m)
        assert a.values.shape == (2, 17)
        assert np.all(a.values[:, 0] == 0)
        assert np.array_equal(a.values, b.values)


def test_sample_fbm_path_count_independent():
    g = TimeGrid.regular(1.0, 16)
    many = fc.sample_fbm(0.3, g, 1, seed=5, paths=1000)
    one = fc.sample_fbm(0.3, g, 1, seed=5, paths=3, start=700)
    assert np.array_equal(many.values[700:703], one.values)
    par = fc.sample_fbm_parallel(0.3, g, 1, 5, "cholesky", 1000, chunk=77)
    assert np.array_equal(par.values, many.values)


def test_brownian_increments_iid():
    g = TimeGrid.regular(1.0, 8)
    for m in fc.METHODS:
        inc = fc.sample_fbm(0.5, g, 1, seed=1, method=m, paths=40000).increments[:, 0]
        C = np.cov(inc.T)
        assert np.allclose(C, np.eye(8) / 8, atol=0.006)


def test_cholesky_covariance_monte_carlo():
    g = TimeGrid.regular(1.0, 16)
    X = fc.sample_fbm_parallel(0.7, g, 1, 11, "cholesky", 200000).values[:, 0]
    err = np.max(np.abs(X.T @ X / X.shape[0] - fc.covariance_matrix(0.7, g).entries))
    assert err <= 0.01


def test_cholesky_and_circulant_agree_in_distribution():
    g = TimeGrid.regular(1.0, 64)
    a = fc.sample_fbm(0.7, g, 1, seed=1, method="cholesky", paths=10000).values[:, 0, -1]
    b = fc.sample_fbm(0.7, g, 1, seed=2, method="circulant", paths=10000).values[:, 0, -1]
    assert stats.ks_2samp(a, b).pvalue > 1e-3


def test_circulant_needs_uniform_grid():
    g = TimeGrid(np.array([0.0, 0.1, 0.5, 1.0]))
    with pytest.raises(DomainError):
        fc.sample_fbm(0.7, g, method="circulant")


def test_volterra_sampler_converges():
    errs = []
    for n in (32, 64, 128):
        g = TimeGrid.regular(1.0, n)
        C = fc.volterra_sampler_covariance(0.7, g)
        errs.append(np.max(np.abs(C - fc.covariance_matrix(0.7, g).entries[1:, 1:])))
    for a, b in zip(errs, errs[1:]):
        assert a / b == pytest.approx(2.0, rel=0.5)


def test_rho_variation():
    g = TimeGrid.regular(1.0, 1024)
    assert fc.rho_variation_2d(0.5, g) == pytest.approx(1.0, abs=1e-12)
    lev = fc.rho_variation_levels(0.7, g)
    assert np.all(np.isfinite(lev))
    assert fc.rho_variation_2d(0.3, g, levels=6) <= fc.rho_variation_2d(0.3, g, levels=8)
    v8 = fc.rho_variation_2d(0.7, g, levels=8)
    v10 = fc.rho_variation_2d(0.7, g, levels=10)
    assert v10 == pytest.approx(v8, rel=0.02)


def test_export_roundtrip(tmp_path):
    g = TimeGrid.regular(1.0, 8)
    p = fc.sample_fbm(0.7, g, 2, seed=9)
    back = fc.from_bytes(fc.to_bytes(p))
    assert fc.to_bytes(p)[:4] == b"FBM1"
    assert np.array_equal(back.values, p.values) and back.hurst == 0.7 and back.seed == 9
    fc.write_csv(tmp_path / "p.csv", p)
    rows = (tmp_path / "p.csv").read_text().splitlines()
    assert rows[0] == "t,B1,B2" and len(rows) == 10
