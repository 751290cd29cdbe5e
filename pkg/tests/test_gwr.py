import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from heatlens.gwr import (
    KernelSpec,
    SingularLocalFit,
    aicc,
    bisquare_weight,
    gwr_bandwidth_search,
    gwr_fit,
    hat_matrix,
    kernel_weights,
    ols,
)
from heatlens.synthetic import global_linear, lattice_coords, two_regime_linear


def test_bisquare_values():
    assert bisquare_weight(0.0, 3.0) == 1.0
    assert bisquare_weight(3.0, 3.0) == 0.0
    assert bisquare_weight(1.5, 3.0) == 0.5625
    assert bisquare_weight(4.0, 3.0) == 0.0
    with pytest.raises(ValueError):
        bisquare_weight(1.0, 0.0)


def test_kernel_spec_validation():
    with pytest.raises(ValueError):
        KernelSpec("gaussian", 10)
    with pytest.raises(ValueError):
        KernelSpec("adaptive", 10.5)
    with pytest.raises(ValueError):
        KernelSpec("fixed", 0)


def linear_data(seed=0, n_side=8):
    rng = np.random.default_rng(seed)
    coords = lattice_coords(n_side)
    x = rng.normal(size=n_side * n_side)
    return x, 1.0 + 2.0 * x, coords


@pytest.mark.parametrize("kernel", [KernelSpec("adaptive", 10), KernelSpec("adaptive", 64),
                                    KernelSpec("fixed", 350.0), KernelSpec("fixed", 1e5)])
def test_noise_free_linear_recovered(kernel):
    x, y, coords = linear_data()
    fit = gwr_fit(x, y, coords, kernel)
    assert np.allclose(fit.coefficients[:, 0], 1.0, atol=1e-9)
    assert np.allclose(fit.coefficients[:, 1], 2.0, atol=1e-9)
    assert np.allclose(fit.residuals, 0.0, atol=1e-9)


def test_two_predictors_back_transformed():
    rng = np.random.default_rng(4)
    coords = lattice_coords(7)
    X = rng.normal(size=(49, 2)) * [3.0, 0.01] + [100.0, -5.0]
    y = -4.0 + 0.5 * X[:, 0] + 70.0 * X[:, 1]
    fit = gwr_fit(X, y, coords, KernelSpec("adaptive", 20))
    assert np.allclose(fit.coefficients, [-4.0, 0.5, 70.0], atol=1e-7)


def test_constant_response():
    x, _, coords = linear_data()
    fit = gwr_fit(x, np.full(x.size, 3.5), coords, KernelSpec("adaptive", 12))
    assert np.allclose(fit.coefficients[:, 0], 3.5, atol=1e-12)


def test_constant_predictor_rejected():
    _, y, coords = linear_data()
    with pytest.raises(ValueError, match="constant predictor"):
        gwr_fit(np.ones(y.size), y, coords, KernelSpec("adaptive", 12))


def test_too_few_locations():
    with pytest.raises(ValueError):
        gwr_fit(np.arange(3.0), np.arange(3.0), np.zeros((3, 2)), KernelSpec("adaptive", 3))


def test_singular_local_fit_names_location():
    coords = lattice_coords(6)
    x = np.where(coords[:, 0] < 300, 0.0, 1.0)  # constant inside each half
    x[0] = 0.5
    y = x.copy()
    with pytest.raises(SingularLocalFit, match="location .* larger bandwidth"):
        gwr_fit(x, y, coords, KernelSpec("fixed", 150.0))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(6, 40))
def test_hat_rows_sum_to_one(seed, k):
    rng = np.random.default_rng(seed)
    coords = rng.uniform(0, 1000, (40, 2))
    X = rng.normal(size=(40, 2))
    S = hat_matrix(X, coords, KernelSpec("adaptive", k))
    assert np.allclose(S.sum(axis=1), 1.0, atol=1e-9)
    y = rng.normal(size=40)
    fit = gwr_fit(X, y, coords, KernelSpec("adaptive", k))
    assert np.allclose(S @ y, fit.fitted, atol=1e-9)
    assert np.allclose(np.diag(S), fit.hat_diag, atol=1e-12)
    assert X.shape[1] + 1 - 1e-9 <= fit.tr_s <= 40 + 1e-9


def test_huge_bandwidth_is_ols():
    d = two_regime_linear(3)
    fit = gwr_fit(d.X, d.y, d.coords, KernelSpec("fixed", 1e9))
    assert np.allclose(fit.coefficients, ols(d.X, d.y), atol=1e-6)


def test_compact_support():
    coords = lattice_coords(5)
    W = kernel_weights(coords, KernelSpec("fixed", 150.0))
    from scipy.spatial.distance import cdist
    assert np.all(W[cdist(coords, coords) >= 150.0] == 0.0)
    Wa = kernel_weights(coords, KernelSpec("adaptive", 6))
    assert np.all((Wa > 0).sum(axis=1) <= 6)


def test_aicc_formula():
    n, rss, tr = 50, 12.0, 5.5
    sigma = math.sqrt(rss / n)
    expected = 2 * n * math.log(sigma) + n * math.log(2 * math.pi) + n * (n + tr) / (n - 2 - tr)
    assert aicc(rss, n, tr) == pytest.approx(expected, rel=1e-14)
    assert aicc(rss, n, 48.0) == math.inf


def test_global_data_prefers_large_bandwidth():
    g = global_linear(1)
    r = two_regime_linear(1)
    cands = [20, 40, 80, 160, 400]
    bg = gwr_bandwidth_search(g.X, g.y, g.coords, "adaptive", candidates=cands).best.bandwidth
    br = gwr_bandwidth_search(r.X, r.y, r.coords, "adaptive", candidates=cands).best.bandwidth
    assert bg == 400
    assert br < bg


def test_single_candidate():
    d = two_regime_linear(0, side=8)
    res = gwr_bandwidth_search(d.X, d.y, d.coords, "fixed", candidates=[450.0])
    assert res.best == KernelSpec("fixed", 450.0) and len(res.trace) == 1


def test_all_singular_candidates():
    d = two_regime_linear(0, side=8)
    with pytest.raises(ValueError, match="singular"):
        gwr_bandwidth_search(d.X, d.y, d.coords, "fixed", candidates=[1.0, 2.0])


def test_two_regime_benchmark():
    d = two_regime_linear(0)
    search = gwr_bandwidth_search(d.X, d.y, d.coords, "adaptive")
    assert search.best.bandwidth < d.y.size
    fit = gwr_fit(d.X, d.y, d.coords, search.best)
    beta = ols(d.X, d.y)
    local = np.sqrt(np.mean((fit.coefficients - d.truth) ** 2))
    glob = np.sqrt(np.mean((beta - d.truth) ** 2))
    assert local <= 0.8 * glob
    resid_global = d.y - (beta[0] + beta[1] * d.X[:, 0])
    assert np.sqrt(np.mean(fit.residuals ** 2)) <= 0.8 * np.sqrt(np.mean(resid_global ** 2))


def test_csv(tmp_path):
    d = two_regime_linear(0, side=6)
    fit = gwr_fit(d.X, d.y, d.coords, KernelSpec("adaptive", 20), names=["x"])
    fit.to_csv(tmp_path / "g.csv", np.arange(36) + 1)
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == "zone_id,beta_intercept,beta_x,local_r2" and len(lines) == 37
