import csv
import warnings

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from heatlens.boosting import FitConfig, fit, regression_metrics
from heatlens.gwboost import (
    LocalFitError,
    LocalModel,
    LocalModelSet,
    global_oob,
    gw_fit,
    loo_bandwidth,
    residual_moran,
)
from heatlens.spatial import global_moran, lattice_weights
from heatlens.synthetic import lattice_coords, two_regime_nonlinear

CFG = FitConfig(n_estimators=100, learning_rate=0.1, max_depth=2, subsample=0.8, seed=3)


@pytest.fixture(scope="module")
def regimes():
    return two_regime_nonlinear(0, side=12)


@pytest.fixture(scope="module")
def fitted(regimes):
    d = regimes
    return gw_fit(d.X, d.y, d.coords, 40, CFG, zone_ids=np.arange(d.y.size) + 100)


def test_uniform_kernel_equals_global(regimes):
    d = regimes
    idx = np.arange(50)
    lms = gw_fit(d.X[idx], d.y[idx], d.coords[idx], 10, CFG, kernel="uniform")
    glob = fit(d.X[idx], d.y[idx], None, CFG)
    ref = glob.predict(d.X)
    for m in lms.models:
        assert np.max(np.abs(m.model.predict(d.X) - ref)) <= 1e-12


def test_compact_support(regimes, fitted):
    d = regimes
    dist = cdist(d.coords, d.coords)
    for i, m in enumerate(fitted.models):
        b = np.sort(dist[i])[39]
        assert np.array_equal(m.rows, np.flatnonzero(dist[i] < b))
        assert m.rows.size <= 39 and i in m.rows


def test_outputs_and_diagnostics(regimes, fitted, tmp_path):
    assert np.all(fitted.local_r2 <= 1.0)
    thresholds = np.linspace(-1, 1, 21)
    counts = [(fitted.local_r2 > t).sum() for t in thresholds]
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    s = fitted.std_residuals
    assert s.std(ddof=1) == pytest.approx(1.0)
    fitted.write_outputs(tmp_path)
    rows = list(csv.reader(open(tmp_path / "local_r2.csv")))
    assert rows[0] == ["zone_id", "local_r2"] and rows[1][0] == "100" and len(rows) == 145
    assert list(csv.reader(open(tmp_path / "std_residuals.csv")))[0] == ["zone_id", "fitted", "residual", "std_residual"]
    assert len(list((tmp_path / "models").glob("zone_*.json"))) == 144


def test_deterministic_across_threads(regimes, fitted):
    d = regimes
    again = gw_fit(d.X, d.y, d.coords, 40, CFG, zone_ids=np.arange(d.y.size) + 100, n_jobs=3)
    assert np.array_equal(again.fitted, fitted.fitted)
    assert np.array_equal(again.local_r2, fitted.local_r2)


def test_local_beats_global_per_regime(regimes, fitted):
    d = regimes
    gp = fit(d.X, d.y, None, CFG).predict(d.X)
    for r in (0, 1):
        m = d.regime == r
        assert fitted.local_r2[m].mean() > regression_metrics(d.y[m], gp[m]).r2


def test_residual_moran_drops(regimes, fitted):
    d = regimes
    w = lattice_weights(12, 12, "queen")
    w.ids = np.arange(144) + 100
    gp = fit(d.X, d.y, None, CFG).predict(d.X)
    glob = global_moran(d.y - gp, w, 0).I
    assert abs(residual_moran(fitted, w, 0).I) < abs(glob)


def test_k_equal_n_models_differ(regimes):
    d = regimes
    idx = np.arange(30)
    lms = gw_fit(d.X[idx], d.y[idx], d.coords[idx], 30, CFG)
    assert not np.array_equal(lms.models[0].model.predict(d.X), lms.models[29].model.predict(d.X))


def test_pseudo_oob(fitted, regimes):
    met = global_oob(fitted)
    assert np.isfinite(met.r2) and met.r2 <= 1
    d = regimes
    full = gw_fit(d.X[:40], d.y[:40], d.coords[:40], 20, FitConfig(n_estimators=10, subsample=1.0))
    with pytest.raises(ValueError, match="no OOB instances"):
        global_oob(full)
    with pytest.raises(ValueError, match="holdout"):
        gw_fit(d.X[:40], d.y[:40], d.coords[:40], 20, FitConfig(n_estimators=10, subsample=1.0), oob="holdout")


def step_data(seed, side=12):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (side * side, 2))
    return X, np.where(X[:, 0] > 0.2, 5.0, 0.0), lattice_coords(side)


@pytest.mark.parametrize("mode", ["iteration", "holdout"])
def test_learnable_target_oob(mode):
    X, y, coords = step_data(1, side=20)
    lms = gw_fit(X, y, coords, 120, FitConfig(n_estimators=100, learning_rate=0.2, max_depth=3, subsample=0.8), oob=mode)
    assert global_oob(lms).r2 >= 0.95


def test_shuffled_labels_holdout_oob():
    d = two_regime_nonlinear(2, side=12)
    y = np.random.default_rng(0).permutation(d.y)
    assert global_oob(gw_fit(d.X, y, d.coords, 40, CFG, oob="holdout")).r2 <= 0.1


def test_shuffled_labels_iteration_oob_leaks():
    # every final-iteration held-out row was in-bag for earlier trees
    d = two_regime_nonlinear(2, side=12)
    y = np.random.default_rng(0).permutation(d.y)
    assert global_oob(gw_fit(d.X, y, d.coords, 40, CFG)).r2 > 0.1


def test_bandwidth_errors(regimes):
    d = regimes
    with pytest.raises(ValueError, match="10 <= k"):
        gw_fit(d.X, d.y, d.coords, 5, CFG)
    with pytest.raises(ValueError, match="10 <= k"):
        gw_fit(d.X, d.y, d.coords, 500, CFG)


def test_zero_radius_names_zone():
    X, y, coords = step_data(0)
    coords = coords.copy()
    coords[:12] = coords[0]
    with pytest.raises(LocalFitError, match="zone 0"):
        gw_fit(X, y, coords, 10, CFG)


def test_fit_error_carries_zone():
    X, y, coords = step_data(0)
    y = y.copy()
    y[5] = np.nan
    with pytest.raises(LocalFitError, match="zone") as e:
        gw_fit(X, y, coords, 10, CFG, zone_ids=np.arange(144) * 2)
    assert e.value.zone_id % 2 == 0


def test_loo_stationary_prefers_large_k():
    rng = np.random.default_rng(5)
    coords = lattice_coords(10)
    X = rng.normal(size=(100, 2))
    y = 3 * np.tanh(2 * X[:, 0]) + X[:, 1] + rng.normal(0, 0.3, 100)
    tr = loo_bandwidth(X, y, coords, [12, 99], CFG)
    assert tr.best == 99


def test_loo_two_regime_prefers_local(regimes):
    d = regimes
    tr = loo_bandwidth(d.X, d.y, d.coords, [30, 143], CFG)
    assert tr.best == 30 and tr.rmse[30] < tr.rmse[143]


def test_loo_skips_and_single(regimes, tmp_path):
    d = regimes
    with pytest.warns(UserWarning, match="skipped"):
        tr = loo_bandwidth(d.X[:40], d.y[:40], d.coords[:40], [20, 40, 80], FitConfig(n_estimators=10))
    assert set(tr.rmse) == {20}
    assert tr.best == 20
    tr.to_csv(tmp_path / "b.csv")
    assert open(tmp_path / "b.csv").read().splitlines()[0] == "k,loo_rmse,selected"
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(ValueError, match="no usable"):
            loo_bandwidth(d.X[:40], d.y[:40], d.coords[:40], [40], FitConfig(n_estimators=10))


def _fake_set(y):
    models = [LocalModel(i, None, np.array([i]), np.ones(1), 0.0, 0.0, np.zeros(0, int), np.zeros(0))
              for i in range(y.size)]
    return LocalModelSet(np.arange(y.size), models, 10, CFG, "iteration", y)


@pytest.mark.slow
def test_white_noise_residuals_not_significant():
    w = lattice_weights(8, 8, "queen")
    passes = sum(residual_moran(_fake_set(np.random.default_rng(s).normal(size=64)), w, 199, seed=s).p_value > 0.05
                 for s in range(100))
    assert passes >= 90


def test_clustered_residuals_significant():
    f = np.zeros((8, 8))
    f[:4] = 1.0
    f += np.random.default_rng(0).normal(0, 0.1, (8, 8))
    assert residual_moran(_fake_set(f.ravel()), lattice_weights(8, 8, "queen"), 199, seed=0).p_value <= 0.05


def test_residual_moran_zone_mismatch(fitted):
    with pytest.raises(ValueError, match="different zones"):
        residual_moran(fitted, lattice_weights(12, 12, "queen"), 0)
