import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from fbmlab import density_lab as dl, rng
from fbmlab.fbm_core import DomainError, TimeGrid, sample_fbm
from fbmlab.vf_dsl import catalog


@pytest.fixture(scope="module")
def constant_samples():
    return dl.sample_states(catalog("constant1d"), 0.7, [0.0], [0.125, 0.25, 0.5, 1.0],
                            100_000, seed=21)


@pytest.fixture(scope="module")
def sine_samples():
    return dl.sample_states(catalog("sine1d"), 0.7, [0.0], [0.125, 0.25, 0.5, 1.0],
                            100_000, seed=22)


def test_kde_standard_normal():
    # single draws put the sup error near 3 stderr of the tolerance, so the
    # tolerance is applied to the median over independent draws
    y = np.linspace(-4, 4, 161)
    errs = []
    for seed in range(5):
        x = np.random.default_rng(seed).standard_normal(100_000)
        est = dl.estimate_density(x, y)
        errs.append(np.max(np.abs(est.values - stats.norm.pdf(y))))
    assert np.median(errs) <= 0.01
    assert est.noise_floor == pytest.approx(10 / (100_000 * est.bandwidth[0]))


def test_kde_agrees_with_scipy():
    x = np.random.default_rng(0).standard_normal(5000)
    y = np.linspace(-3, 3, 31)
    est = dl.estimate_density(x, y, min_samples=1)
    ref = stats.gaussian_kde(x, bw_method=est.bandwidth[0] / x.std(ddof=1))(y)
    assert np.allclose(est.values, ref, atol=1e-12)


def test_kde_identical_samples_spike():
    axes = [np.linspace(0.49, 0.51, 801)]
    est = dl.estimate_density(np.full(2000, 0.5), dl.product_grid(axes), axes=axes)
    assert est.integral() == pytest.approx(1.0, abs=1e-3)
    assert est.points[np.argmax(est.values), 0] == pytest.approx(0.5)


def test_kde_product_normal_2d():
    x = np.random.default_rng(1).standard_normal((100_000, 2)) * [1.0, 0.5]
    axes = [np.linspace(-3, 3, 31), np.linspace(-1.5, 1.5, 31)]
    est = dl.estimate_density(x, dl.product_grid(axes), axes=axes)
    pts = est.points
    exact = stats.norm.pdf(pts[:, 0]) * stats.norm.pdf(pts[:, 1], scale=0.5)
    assert np.max(np.abs(est.values - exact)) <= 0.02


def test_kde_minimum_samples():
    with pytest.raises(DomainError):
        dl.estimate_density(np.zeros(10), [0.0])


@settings(max_examples=25)
@given(st.floats(-5, 5), st.floats(0.1, 3), st.floats(0, 0.9), st.integers(0, 2**31))
def test_kde_integral_over_capturing_box(mu, sd, mix, seed):
    g = np.random.default_rng(seed)
    k = 4000
    x = np.where(g.random(k) < mix, mu + sd * g.standard_normal(k), -mu + 3 * sd * g.standard_t(3, k))
    # the box holds every sample plus 6 bandwidths, on a mesh of h/4
    h = float(dl.silverman_bandwidth(x[:, None])[0])
    lo, hi = x.min() - 6 * h, x.max() + 6 * h
    axes = [np.linspace(lo, hi, int(np.ceil((hi - lo) / (h / 4))) + 1)]
    integral = dl.estimate_density(x, dl.product_grid(axes), axes=axes).integral()
    assert 0.9 <= integral <= 1.05


def test_lamperti_constant_is_gaussian():
    y = np.linspace(-3, 3, 13)
    p = dl.lamperti_density(catalog("constant1d"), 0.7, 0.5, 0.5, y)
    assert np.allclose(p, stats.norm.pdf(y, 0.5, 0.5 ** 0.7), rtol=1e-10)


def test_lamperti_integrates_to_one():
    vf = catalog("sine1d")
    val, _ = integrate.quad(lambda y: dl.lamperti_density(vf, 0.35, 0.0, 1.0, y)[0], -15, 15,
                            limit=200)
    assert val == pytest.approx(1.0, abs=1e-8)


def test_kde_matches_lamperti(sine_samples):
    y = np.linspace(-2.5, 3.5, 61)
    est = dl.estimate_density(sine_samples[:, -1], y[:, None])
    h = est.bandwidth[0]
    u = np.linspace(-6, 6, 241)
    fine = dl.lamperti_density(catalog("sine1d"), 0.7, 0.0, 1.0, np.add.outer(y, h * u).ravel())
    smoothed = integrate.trapezoid(fine.reshape(y.size, -1) * stats.norm.pdf(u), u, axis=1)
    assert np.all(np.abs(est.values - smoothed) <= 4 * est.stderr + 1e-4)


def test_decay_fit_recovers_exponent():
    r = np.linspace(0, 3, 50)
    for q in (1.4, 2.0, 2.7):
        q_hat, a, b, _ = dl.fit_decay_exponent(r, 0.3 - 0.8 * r ** q)
        assert (q_hat, a, b) == pytest.approx((q, 0.3, 0.8), abs=1e-4)


def test_bound_constants_exact_gaussian():
    H = 0.7
    rows = []
    for t in (0.125, 0.25, 0.5, 1.0):
        y = np.linspace(-3, 3, 41) * t ** H
        p = stats.norm.pdf(y, scale=t ** H)
        rows.append((np.log(p * t ** H), y ** 2 / t ** (2 * H)))
    L, z = (np.concatenate(v) for v in zip(*rows))
    c1, c2, _ = dl.fit_bound_constants(L, z)
    assert c1 == pytest.approx((2 * np.pi) ** -0.5, rel=1e-10)
    assert c2 == pytest.approx(2.0, rel=1e-10)


def test_upper_bound_gaussian_case(constant_samples):
    fit = dl.verify_density_upper_bound(catalog("constant1d"), 0.7, [0.0],
                                        samples=constant_samples,
                                        check_constants=((2 * np.pi) ** -0.5, 2.0))
    assert fit.fitted["q"] == pytest.approx(2.0, rel=0.05)
    assert fit.fitted["slope"] == pytest.approx(-0.7, rel=0.05)
    assert fit.checks["bound_satisfiable"]
    assert fit.checks["given_constants_hold"]
    assert fit.passed


def test_upper_bound_sine_satisfiable(sine_samples):
    fit = dl.verify_density_upper_bound(catalog("sine1d"), 0.7, [0.0], samples=sine_samples)
    assert fit.checks["bound_satisfiable"]
    assert fit.fitted["slope"] == pytest.approx(-0.7, rel=0.15)


def test_sine_exponent_matches_exact_density(sine_samples):
    # the radial profile fit applied to the exact density over the same range
    # lands far below 1.7: the density is skewed, not radially Gaussian
    fit = dl.verify_density_upper_bound(catalog("sine1d"), 0.7, [0.0], samples=sine_samples)
    lo, hi = np.quantile(sine_samples[:, -1, 0], [1e-4, 1 - 1e-4])
    y = np.linspace(lo, hi, 161)
    exact = dl.lamperti_density(catalog("sine1d"), 0.7, 0.0, 1.0, y)
    q_exact = dl.fit_decay_exponent(np.abs(y), np.log(exact))[0]
    assert q_exact < 1.5
    assert fit.fitted["q"] == pytest.approx(q_exact, abs=0.3)


@pytest.mark.xfail(strict=True, reason="radial exponent of the skewed sine1d density is ~1, "
                                       "see the exact-density comparison")
def test_sine_exponent_in_literal_band(sine_samples):
    fit = dl.verify_density_upper_bound(catalog("sine1d"), 0.7, [0.0], samples=sine_samples)
    assert 1.7 <= fit.fitted["q"] <= 2.3


def test_upper_bound_rough_regime_reports_both():
    fit = dl.verify_density_upper_bound(catalog("sine1d"), 0.35, [0.0], paths=50_000, seed=3)
    assert fit.checks["bound_satisfiable"]
    assert fit.targets["q"] == pytest.approx(1.7)
    assert fit.diagnostics["q_closer_to"] in ("2H+1", "2")
    assert "q" not in fit.band


def test_bound_fit_stable_under_more_data(constant_samples):
    g = np.random.default_rng(5)
    last = constant_samples
    rate = {}
    for k in (20_000, 80_000):
        ok = []
        for _ in range(4):
            sub = last[g.integers(0, last.shape[0], k)]
            ok.append(dl.verify_density_upper_bound(catalog("constant1d"), 0.7, [0.0],
                                                    samples=sub).checks["bound_satisfiable"])
        rate[k] = np.mean(ok)
    assert rate[80_000] >= rate[20_000] - 0.25


def test_positivity_gaussian_and_mode():
    rep = dl.verify_positivity(catalog("constant1d"), 0.7, [0.0], paths=20_000, seed=1)
    assert rep.passed
    assert rep.lower[len(rep.probes) // 2] > 0.3


def test_positivity_elliptic_rough():
    rep = dl.verify_positivity(catalog("sine1d"), 0.35, [0.0], paths=100_000, seed=2,
                               probes=[[-2.0], [0.0], [2.0]])
    assert rep.passed
    assert rep.to_dict()["passed"]


def test_tail_fit_recovers_model():
    xi, t = np.meshgrid(np.linspace(0.3, 3, 12), [0.125, 0.25, 0.5, 1.0])
    xi, t = xi.ravel(), t.ravel()
    p = 1.7 * np.exp(dl._tail_model([0.0, np.log(0.9), 2.0, -1.4], xi, t))
    f = dl.fit_tail(xi, t, p, np.full(xi.size, 100))
    assert f["q"] == pytest.approx(2.0, abs=1e-4)
    assert f["kappa"] == pytest.approx(-1.4, abs=1e-4)


def test_tail_table_counts():
    sups = np.abs(np.random.default_rng(0).standard_normal((5000, 2))) * [0.5, 1.0]
    tab = dl.tail_table(sups, [0.5, 1.0], need=50)
    assert np.all(tab[:, 3] >= 50)
    assert np.allclose(tab[:, 2], tab[:, 3] / 5000)


def test_concentration_gaussian():
    fit = dl.verify_concentration(catalog("constant1d"), 0.7, [0.0], paths=50_000,
                                  steps=256, seed=4)
    assert 1.7 <= fit.fitted["q"] <= 2.3
    assert fit.fitted["t_slope"] == pytest.approx(-1.4, rel=0.15)


def test_density_csv(tmp_path):
    est = dl.estimate_density(np.random.default_rng(0).standard_normal(2000), [0.0, 1.0], t=1.0)
    est.write_csv(tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "t,y1,p_hat,stderr" and len(lines) == 3


def test_concentration_sine_solver_equals_lamperti_map():
    # X = phi(B) with phi' = 1 + 0.5 sin(phi), so the running sup of |X| is an
    # exact function of the running max and min of the driver. The fitted
    # exponents from the solver and from the exact map must coincide; both sit
    # well below the Gaussian value 2 on the sampled range of xi.
    H, steps, paths, seed = 0.7, 256, 50_000, 3
    times = 2.0 ** -np.arange(6, -1, -1)
    grid = TimeGrid.regular(1.0, steps)
    idx = [grid.index_of(t) for t in times]

    def extremes(ab):
        B = sample_fbm(H, grid, 1, seed, "cholesky", ab[1] - ab[0], ab[0]).values[:, 0]
        return np.maximum.accumulate(B, axis=1)[:, idx], np.minimum.accumulate(B, axis=1)[:, idx]

    parts = rng.pmap(extremes, rng.chunks(paths, 8192))
    hi = np.concatenate([p[0] for p in parts])
    lo = np.concatenate([p[1] for p in parts])
    z = np.linspace(-40, 40, 400_001)
    psi = integrate.cumulative_trapezoid(1 / (1 + 0.5 * np.sin(z)), z, initial=0)
    phi = lambda b: np.interp(b, psi - np.interp(0.0, z, psi), z)
    exact = np.maximum(phi(hi), -phi(lo))

    solved = dl.running_sup(catalog("sine1d"), H, [0.0], times, paths, seed=seed, steps=steps)
    assert np.max(np.abs(solved - exact)) < 2e-3
    f_exact = dl.verify_concentration(catalog("sine1d"), H, [0.0], times=times, sups=exact)
    f_solved = dl.verify_concentration(catalog("sine1d"), H, [0.0], times=times, sups=solved)
    assert f_solved.fitted["q"] == pytest.approx(f_exact.fitted["q"], abs=0.02)
    assert f_solved.fitted["t_slope"] == pytest.approx(f_exact.fitted["t_slope"], abs=0.02)
    assert f_exact.fitted["q"] < 1.7
