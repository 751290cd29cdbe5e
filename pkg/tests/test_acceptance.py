"""The eleven acceptance criteria, each at its stated tolerance.

Every test records its outcome through the ``criterion`` fixture; the
terminal summary prints one PASS/FAIL line per criterion.
"""

import csv
import json
import math
import time

import numpy as np
import pytest

from heatlens.boosting import FitConfig, fit, nested_cv, regression_metrics
from heatlens.city import make_synthetic_city
from heatlens.cli import main as cli_main
from heatlens.explain import brute_shapley, gam_fit, transition_point, tree_shap
from heatlens.gwboost import global_oob, gw_fit, loo_bandwidth, residual_moran
from heatlens.gwr import KernelSpec, gwr_bandwidth_search, gwr_fit, hat_matrix, ols
from heatlens.landscape import compute_metrics, label_patches
from heatlens.microclimate import (
    DIRECTIONS,
    SIGMA,
    VIEW_FACTORS,
    RadiationField,
    mean_radiant_temperature,
    utci,
    utci_category,
)
from heatlens.morphology import SvfConfig, compute_svf
from heatlens.pipeline import DEFAULT_FEATURES, run_pipeline, validate_config
from heatlens.raster import Grid
from heatlens.spatial import global_moran, lattice_weights, lisa
from heatlens.synthetic import (
    crossing_cloud,
    interaction_data,
    lattice_coords,
    two_regime_linear,
    two_regime_nonlinear,
)
from oracles import landscape_oracle, monte_carlo_svf, scalar_tmrt


def block_dsm(seed, n=64, blocks=14):
    # flat ground with rectangular blocks at least three cells thick
    rng = np.random.default_rng(seed)
    d = np.zeros((n, n))
    for _ in range(blocks):
        h, w = rng.integers(3, 12, 2)
        r, c = rng.integers(0, n - h), rng.integers(0, n - w)
        d[r:r + h, c:c + w] = rng.uniform(3, 25)
    return d


def brute_moran(x, w):
    n = len(x)
    z = [v - sum(x) / n for v in x]
    s0 = sum(map(sum, w))
    num = sum(w[i][j] * z[i] * z[j] for i in range(n) for j in range(n))
    return n / s0 * num / sum(v * v for v in z)


def test_criterion_01_svf(criterion):
    with criterion(1, "SVF: flat = 1, Monte-Carlo MAE < 0.02 on 5 DSMs, 100 monotone perturbations, 256^2 <= 2 min"):
        flat = compute_svf(Grid(np.full((16, 16), 3.0)), cfg=SvfConfig(directions=360)).values
        assert np.max(np.abs(flat - 1.0)) <= 1e-6

        cfg = SvfConfig(directions=360, search_radius=150)
        for seed in range(5):
            d = block_dsm(seed)
            svf = compute_svf(Grid(d), cfg=cfg).values
            ground = np.argwhere(d == 0)
            ground = ground[(ground.min(axis=1) >= 8) & (ground.max(axis=1) < 56)]
            pick = ground[np.random.default_rng(100 + seed).choice(len(ground), 6, replace=False)]
            err = [abs(svf[r, c] - monte_carlo_svf(d, None, r, c, n_rays=1_000_000, seed=10 * seed + i,
                                                     radius_cells=150))
                   for i, (r, c) in enumerate(pick)]
            assert np.mean(err) < 0.02, (seed, err)

        rng = np.random.default_rng(8)
        small = SvfConfig(directions=24, search_radius=20)
        for trial in range(100):
            base = block_dsm(trial, n=16, blocks=3) + rng.uniform(0, 2, (16, 16))
            before = compute_svf(Grid(base), cfg=small).values
            r, c = rng.integers(16, size=2)
            raised = base.copy()
            raised[r, c] += rng.uniform(0.5, 20)
            after = compute_svf(Grid(raised), cfg=small).values
            others = np.ones(base.shape, dtype=bool)
            others[r, c] = False
            assert np.all(after[others] <= before[others]), trial

        big = block_dsm(0, n=256, blocks=150)
        t = time.perf_counter()
        compute_svf(Grid(big), cfg=SvfConfig())
        assert time.perf_counter() - t <= 120.0


def test_criterion_02_tmrt(criterion):
    with criterion(2, "Tmrt: isothermal enclosure, 20 random flux fields vs scalar"):
        for temp in (250.0, 300.0, 330.0):
            k = {d: Grid(np.zeros((3, 3))) for d in DIRECTIONS}
            lw = {d: Grid(np.full((3, 3), SIGMA * temp ** 4)) for d in DIRECTIONS}
            got = mean_radiant_temperature(RadiationField(k, lw)).values
            assert np.max(np.abs(got - (temp - 273.15))) <= 1e-6

        rng = np.random.default_rng(20)
        for _ in range(20):
            K = {d: Grid(rng.uniform(0, 900, (6, 6))) for d in DIRECTIONS}
            L = {d: Grid(rng.uniform(250, 600, (6, 6))) for d in DIRECTIONS}
            t = mean_radiant_temperature(RadiationField(K, L)).values
            for r in range(6):
                for c in range(6):
                    ref = scalar_tmrt([K[d].values[r, c] for d in DIRECTIONS],
                                      [L[d].values[r, c] for d in DIRECTIONS],
                                      [VIEW_FACTORS[d] for d in DIRECTIONS])
                    assert abs(t[r, c] - ref) <= 1e-9


def test_criterion_03_utci(criterion):
    with criterion(3, "UTCI: 200 points vs reference within 1e-4, bands at 32/38/46"):
        from pythermalcomfort.models import utci as ref_utci

        rng = np.random.default_rng(33)
        ta = rng.uniform(-45, 48, 200)
        tmrt = ta + rng.uniform(-25, 65, 200)
        va = rng.uniform(0.5, 16, 200)
        rh = rng.uniform(5, 100, 200)
        got = utci(ta, tmrt, va, rh).utci
        ref = np.array(ref_utci(ta, tmrt, va, rh, round_output=False, limit_inputs=False).utci)
        assert np.max(np.abs(got - ref)) < 1e-4

        assert utci_category(31.999) == "moderate heat stress"
        assert utci_category(32.0) == "strong heat stress"
        assert utci_category(37.999) == "strong heat stress"
        assert utci_category(38.0) == "very strong heat stress"
        assert utci_category(45.999) == "very strong heat stress"
        assert utci_category(46.0) == "extreme heat stress"


def test_criterion_04_moran(criterion):
    with criterion(4, "Moran/LISA: checkerboard -1, half split 17/24, reproducible p-values, affine invariance"):
        w = lattice_weights(4, 4)
        dense = w.dense().tolist()
        checker = np.array([(r + c) % 2 for r in range(4) for c in range(4)], dtype=float)
        half = np.array([1.0 if c < 2 else 0.0 for r in range(4) for c in range(4)])
        assert abs(global_moran(checker, w, 0).I + 1.0) <= 1e-9
        assert abs(brute_moran(list(checker), dense) + 1.0) <= 1e-9
        assert abs(global_moran(half, w, 0).I - 17 / 24) <= 1e-9
        assert abs(brute_moran(list(half), dense) - 17 / 24) <= 1e-9

        wq = lattice_weights(6, 6, "queen")
        x = np.random.default_rng(3).normal(size=36)
        assert global_moran(x, wq, 199, seed=7).p_value == global_moran(x, wq, 199, seed=7).p_value
        la, lb = lisa(x, wq, 199, seed=7), lisa(x, wq, 199, seed=7, n_jobs=4)
        assert np.array_equal(la.p_value, lb.p_value, equal_nan=True) and la.category == lb.category

        rng = np.random.default_rng(4)
        w5 = lattice_weights(5, 5, "queen")
        for _ in range(50):
            x = rng.normal(size=25)
            a, b = rng.uniform(0.01, 100), rng.uniform(-1e3, 1e3)
            assert abs(global_moran(a * x + b, w5, 0).I - global_moran(x, w5, 0).I) < 1e-12


def test_criterion_05_gwr(criterion):
    with criterion(5, "GWR: exact recovery, hat rows sum to 1, b -> inf is OLS, two-regime >= 20% gain"):
        rng = np.random.default_rng(0)
        coords = lattice_coords(8)
        x = rng.normal(size=64)
        for kernel in (KernelSpec("adaptive", 10), KernelSpec("fixed", 350.0)):
            f = gwr_fit(x, 1.0 + 2.0 * x, coords, kernel)
            assert np.max(np.abs(f.coefficients - [1.0, 2.0])) <= 1e-9

        for seed in range(10):
            r = np.random.default_rng(seed)
            S = hat_matrix(r.normal(size=(40, 2)), r.uniform(0, 1000, (40, 2)), KernelSpec("adaptive", 12))
            assert np.max(np.abs(S.sum(axis=1) - 1.0)) <= 1e-9

        d = two_regime_linear(3)
        f = gwr_fit(d.X, d.y, d.coords, KernelSpec("fixed", 1e9))
        assert np.max(np.abs(f.coefficients - ols(d.X, d.y))) <= 1e-6

        d = two_regime_linear(0)
        search = gwr_bandwidth_search(d.X, d.y, d.coords, "adaptive")
        assert math.isfinite(search.best.bandwidth) and search.best.bandwidth < d.y.size
        f = gwr_fit(d.X, d.y, d.coords, search.best)
        beta = ols(d.X, d.y)
        resid_global = d.y - (beta[0] + beta[1] * d.X[:, 0])
        assert np.sqrt(np.mean(f.residuals ** 2)) <= 0.8 * np.sqrt(np.mean(resid_global ** 2))


def test_criterion_06_boosting(criterion):
    with criterion(6, "Boosting: closed form, weight = duplication, monotone loss, nested CV depth, runtime"):
        cfg = FitConfig(n_estimators=10, learning_rate=0.3, max_depth=1, subsample=1.0, reg_lambda=0.0)
        pred = fit([[0.0], [1.0]], [0.0, 1.0], None, cfg).predict([[0.0], [1.0]])
        assert abs(pred[0] - 0.5 * 0.7 ** 10) <= 1e-9 and abs(pred[1] - (1 - 0.5 * 0.7 ** 10)) <= 1e-9

        rng = np.random.default_rng(1)
        X = rng.normal(size=(60, 4))
        y = np.sin(X[:, 0]) + X[:, 1] * (X[:, 2] > 0) + rng.normal(0, 0.2, 60)
        w = np.ones(60)
        w[[3, 17]] = 2.0
        dup = np.concatenate([np.arange(60), [3, 17]])
        cfg = FitConfig(n_estimators=50, max_depth=3, subsample=1.0)
        Z = rng.normal(size=(300, 4))
        assert np.max(np.abs(fit(X, y, w, cfg).predict(Z) - fit(X[dup], y[dup], None, cfg).predict(Z))) <= 1e-12

        for seed in range(20):
            r = np.random.default_rng(seed)
            m = fit(X, y, r.uniform(0, 2, 60), FitConfig(n_estimators=30, learning_rate=r.uniform(0.01, 1),
                                                         max_depth=int(r.integers(1, 5)),
                                                         reg_lambda=r.uniform(0, 5), subsample=1.0))
            assert np.all(np.diff(m.loss_trace) <= 1e-12)

        d = interaction_data(0)
        res = nested_cv(d.X, d.y, {"max_depth": [1, 2, 3, 4]}, seed=0,
                        base=FitConfig(n_estimators=100, learning_rate=0.1))
        assert sum(c.max_depth == 2 for c in res.winners) >= 4

        X = rng.normal(size=(500, 20))
        y = X[:, 0] * X[:, 1] + np.sin(X[:, 2]) + rng.normal(0, 0.1, 500)
        fit(X[:20], y[:20], None, FitConfig(n_estimators=2))
        t = time.perf_counter()
        fit(X, y, None, FitConfig(n_estimators=500, max_depth=6))
        assert time.perf_counter() - t <= 60.0


def test_criterion_07_gw_boost(criterion):
    with criterion(7, "GW-boost: uniform = global, n = 400 two-regime benchmark, pseudo-OOB"):
        cfg = FitConfig(n_estimators=100, learning_rate=0.1, max_depth=2, subsample=0.8, seed=3)
        d = two_regime_nonlinear(0, side=20)
        n = d.y.size

        idx = np.arange(50)
        lms = gw_fit(d.X[idx], d.y[idx], d.coords[idx], 10, cfg, kernel="uniform")
        ref = fit(d.X[idx], d.y[idx], None, cfg).predict(d.X)
        for m in lms.models:
            assert np.max(np.abs(m.model.predict(d.X) - ref)) <= 1e-12

        trace = loo_bandwidth(d.X, d.y, d.coords, [40, 100, 200, n - 1], cfg)
        assert trace.best < n - 1
        lms = gw_fit(d.X, d.y, d.coords, trace.best, cfg)
        gp = fit(d.X, d.y, None, cfg).predict(d.X)
        for r in (0, 1):
            m = d.regime == r
            assert lms.local_r2[m].mean() > regression_metrics(d.y[m], gp[m]).r2
        w = lattice_weights(20, 20, "queen")
        assert abs(residual_moran(lms, w, 0).I) < abs(global_moran(d.y - gp, w, 0).I)

        assert math.isfinite(global_oob(lms).r2)
        full = gw_fit(d.X[:40], d.y[:40], d.coords[:40], 20, FitConfig(n_estimators=10, subsample=1.0))
        with pytest.raises(ValueError, match="no OOB instances"):
            global_oob(full)


def _random_model(seed, p, depth=3, trees=10):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(120, p))
    y = X[:, 0] * X[:, 1 % p] + np.sin(2 * X[:, 2 % p]) + rng.normal(0, 0.1, 120)
    cfg = FitConfig(n_estimators=trees, learning_rate=0.2, max_depth=depth, subsample=0.8, seed=seed)
    return fit(X, y, rng.uniform(0.2, 2.0, 120), cfg), X


def test_criterion_08_shap(criterion):
    with criterion(8, "SHAP: additivity, brute-force Shapley for <= 10 features, dummy and symmetry"):
        for seed in range(10):
            p = 1 + seed
            model, X = _random_model(seed, p, depth=1 + seed % 5)
            s = tree_shap(model, X)
            assert np.max(np.abs(s.base_value + s.values.sum(axis=1) - model.predict(X))) <= 1e-9
            for i in range(2):
                assert np.max(np.abs(brute_shapley(model, X[i]) - s.values[i])) <= 1e-9

        rng = np.random.default_rng(6)
        X = rng.normal(size=(80, 3))
        X[:, 1] = 2.0
        model = fit(X, X[:, 0] + X[:, 2], None, FitConfig(n_estimators=20, max_depth=3))
        assert np.all(tree_shap(model, X).values[:, 1] == 0.0)

        # y symmetric in two exchangeable, independent features
        X = np.column_stack([np.tile([0.0, 1.0], 50), np.repeat([0.0, 1.0], 50)])
        model = fit(X, X[:, 0] + X[:, 1], None, FitConfig(n_estimators=5, max_depth=2, subsample=1.0))
        for x in ([0.0, 0.0], [1.0, 1.0]):
            phi = tree_shap(model, np.array([x])).values[0]
            assert abs(phi[0] - phi[1]) <= 1e-9
            assert np.allclose(phi, brute_shapley(model, x), atol=1e-9)


def test_criterion_09_gam(criterion):
    with criterion(9, "GAM: linear crossing 0.51 +- 1e-3, noisy 0.81 +- 0.03 in >= 90/100 seeds"):
        x = np.random.default_rng(0).uniform(0, 1, 200)
        assert abs(transition_point(gam_fit(x, 2.0 * x - 1.02)) - 0.51) <= 1e-3
        hits = 0
        for seed in range(100):
            xs = transition_point(gam_fit(*crossing_cloud(seed)))
            hits += xs is not None and abs(xs - 0.81) <= 0.03
        assert hits >= 90, hits


HAND_GRIDS = [
    [[1] * 4] * 4,
    [[1, 1, 2, 2]] * 4,
    [[(r + c) % 2 + 1 for c in range(4)] for r in range(4)],
    [[1, 1, 2, 3], [1, 2, 2, 3], [3, 3, 2, 1], [3, 1, 1, 1]],
    [[2, 2, 2, 2], [2, 1, 1, 2], [2, 1, 3, 2], [2, 2, 2, 2]],
    [[1, 2, 2, 2], [2, 1, 2, 2], [2, 2, 1, 2], [2, 2, 2, 1]],
]


def _same(a, b):
    return (math.isnan(a) and math.isnan(b)) or a == b


def test_criterion_10_landscape(criterion):
    with criterion(10, "Landscape: hand grids exact vs oracle, SHDI = ln 2, SHEI = 1, CONTAG = 100"):
        for rows in HAND_GRIDS:
            got = compute_metrics(label_patches(Grid(np.array(rows, dtype=float)), 8))
            ref = landscape_oracle(rows, 1.0, 8, None)
            assert sorted(got.by_class) == sorted(ref["class"])
            for k, vals in ref["class"].items():
                for name, v in vals.items():
                    assert _same(got.by_class[k][name], v), (rows, k, name)
            for name, v in ref["landscape"].items():
                assert _same(got.landscape[name], v), (rows, name)

        split = compute_metrics(label_patches(Grid(np.array(HAND_GRIDS[1], dtype=float))))
        assert abs(split.landscape["SHDI"] - math.log(2)) <= 1e-15
        assert abs(split.landscape["SHEI"] - 1.0) <= 1e-15
        assert compute_metrics(label_patches(Grid(np.ones((4, 4))))).landscape["CONTAG"] == 100.0


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _check_schemas(out):
    classes = {f"{a}-{b}" for a in "123" for b in "123"}
    mm = _rows(out / "mismatch.csv")
    assert list(mm[0]) == ["zone_id", "lst_mean", "utci_mean", "z_mismatch", "biv_class"]
    assert all(math.isfinite(float(r["z_mismatch"])) and r["biv_class"] in classes for r in mm)
    assert all(float(r["z_mismatch"]) >= 0.0 for r in mm)
    for tag in ("lst", "utci"):
        r2 = _rows(out / "gw_boost" / tag / "local_r2.csv")
        assert list(r2[0]) == ["zone_id", "local_r2"] and len(r2) == len(mm)
        assert all(float(r["local_r2"]) <= 1.0 for r in r2)
        lp = _rows(out / "shap" / tag / "local_primary.csv")
        assert list(lp[0])[:3] == ["zone_id", "primary_gain_feature", "primary_shap_feature"]
        assert len(lp) == len(mm)
        assert all(r["primary_gain_feature"] in DEFAULT_FEATURES and r["primary_shap_feature"] in DEFAULT_FEATURES
                   for r in lp)
    tp = _rows(out / "transition_points.csv")
    assert list(tp[0]) == ["target", "feature", "transition_x", "lambda", "edf"]
    assert {r["target"] for r in tp} == {"LST_mean", "UTCI_mean"}
    for r in tp:
        assert r["transition_x"] == "" or math.isfinite(float(r["transition_x"]))
        assert float(r["lambda"]) >= 0 and float(r["edf"]) > 0


@pytest.mark.slow
def test_criterion_11_end_to_end(criterion, tmp_path):
    with criterion(11, "End-to-end: seeded city pipeline <= 10 min, schema-valid CSVs, bit-reproducible"):
        city = make_synthetic_city(0, 192)
        cfg_a = city.write(tmp_path / "a")
        t = time.perf_counter()
        assert cli_main(["pipeline", "--config", str(cfg_a), "--quiet"]) == 0
        assert time.perf_counter() - t <= 600.0
        out = tmp_path / "a" / "out"
        _check_schemas(out)

        first = validate_config(cfg_a)
        cfg_b = validate_config(city.write(tmp_path / "b", **{"": {"n_jobs": 4}}))
        second = run_pipeline(cfg_b).manifest
        manifest = json.loads((out / "manifest.json").read_text())
        assert first.seed == cfg_b.seed
        assert second["outputs"] == manifest["outputs"]
        assert second["run_hash"] == manifest["run_hash"]
