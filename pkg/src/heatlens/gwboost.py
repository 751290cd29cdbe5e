"""Geographically weighted boosting: one boosted model per location.

Each location's model is trained on its adaptive-kernel neighbourhood with
bi-square distance weights passed as sample weights. Hyperparameters are
shared across locations; only the neighbour count k is tuned, by
leave-one-out prediction.
"""

from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .boosting import BoostedModel, FitConfig, Metrics, fit, predict, regression_metrics, save_model
from .gwr import bisquare_weight
from .spatial import MoranResult, SpatialWeights, global_moran

DEFAULT_CANDIDATES = (30, 50, 70, 94, 120)
OOB_MODES = ("iteration", "holdout")


class LocalFitError(RuntimeError):
    def __init__(self, zone_id, cause):
        super().__init__(f"local fit failed at zone {zone_id}: {cause}")
        self.zone_id = zone_id


@dataclass
class LocalModel:
    zone_id: int
    model: BoostedModel
    rows: np.ndarray  # neighbourhood rows with positive weight
    weights: np.ndarray  # aligned with rows
    prediction: float
    local_r2: float
    oob_rows: np.ndarray  # global row indices
    oob_pred: np.ndarray


@dataclass
class LocalModelSet:
    zone_ids: np.ndarray
    models: list[LocalModel]
    k: int | None  # None for the uniform diagnostic kernel
    config: FitConfig
    oob_mode: str
    y: np.ndarray

    @property
    def fitted(self) -> np.ndarray:
        return np.array([m.prediction for m in self.models])

    @property
    def residuals(self) -> np.ndarray:
        return self.y - self.fitted

    @property
    def std_residuals(self) -> np.ndarray:
        """Residuals divided by their sample standard deviation (ddof 1)."""
        r = self.residuals
        sd = r.std(ddof=1)
        if not sd > 0:
            return np.zeros_like(r)
        return r / sd

    @property
    def local_r2(self) -> np.ndarray:
        return np.array([m.local_r2 for m in self.models])

    def write_outputs(self, outdir, model_dir: str | None = "models") -> None:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "local_r2.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["zone_id", "local_r2"])
            for zid, r2 in zip(self.zone_ids, self.local_r2):
                w.writerow([int(zid), repr(float(r2))])
        with open(out / "std_residuals.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["zone_id", "fitted", "residual", "std_residual"])
            for zid, f, r, s in zip(self.zone_ids, self.fitted, self.residuals, self.std_residuals):
                w.writerow([int(zid), repr(float(f)), repr(float(r)), repr(float(s))])
        if model_dir:
            (out / model_dir).mkdir(exist_ok=True)
            for m in self.models:
                save_model(m.model, out / model_dir / f"zone_{int(m.zone_id)}.json")


def _prepare(X, y, coords, zone_ids, names):
    from .boosting import _as_matrix

    X, names = _as_matrix(X, names)
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    coords = np.asarray(coords, dtype=np.float64)
    n = X.shape[0]
    if y.size != n or coords.shape != (n, 2):
        raise ValueError("X, y and coords must describe the same n locations")
    zone_ids = np.arange(n) if zone_ids is None else np.asarray(zone_ids, dtype=np.int64)
    if zone_ids.size != n or np.unique(zone_ids).size != n:
        raise ValueError("zone_ids must be unique, one per location")
    return X, y, coords, zone_ids, names


def _weighted_r2(y, pred, w):
    ybar = np.dot(w, y) / w.sum()
    tss = np.dot(w, (y - ybar) ** 2)
    return 1.0 - np.dot(w, (y - pred) ** 2) / tss if tss > 0 else math.nan


def _run(fn, items, n_jobs):
    if n_jobs == 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=n_jobs) as ex:
        return list(ex.map(fn, items))


def gw_fit(X, y, coords, k: int, config: FitConfig = FitConfig(), zone_ids=None, names: Sequence[str] | None = None,
           kernel: str = "bisquare", oob: str = "iteration", n_jobs: int = 1) -> LocalModelSet:
    """Fit one boosted model per location.

    ``kernel="uniform"`` is a diagnostic mode: every location trains on all
    rows with unit weights and the unkeyed seed, so each local model is the
    global model. With ``oob="iteration"`` the pseudo-OOB set of a location is
    the rows its final tree did not see. ``oob="holdout"`` instead withholds a
    seeded ``1 - subsample`` share of the neighbourhood from every tree, which
    gives a leakage-free estimate at the cost of training data.
    """
    X, y, coords, zone_ids, names = _prepare(X, y, coords, zone_ids, names)
    n = X.shape[0]
    if kernel not in ("bisquare", "uniform"):
        raise ValueError(f"kernel must be 'bisquare' or 'uniform', got {kernel!r}")
    if oob not in OOB_MODES:
        raise ValueError(f"oob must be one of {OOB_MODES}, got {oob!r}")
    if kernel == "bisquare":
        if not 10 <= k <= n:
            raise ValueError(f"adaptive bandwidth k must satisfy 10 <= k <= n = {n}, got {k}")
        dist = cdist(coords, coords)
        b = np.partition(dist, k - 1, axis=1)[:, k - 1]
    if oob == "holdout" and config.subsample >= 1:
        raise ValueError("holdout pseudo-OOB needs subsample < 1")

    def one(i):
        zid = int(zone_ids[i])
        if kernel == "uniform":
            w = np.ones(n)
            key = ()
        else:
            if not b[i] > 0:
                raise LocalFitError(zid, "all kernel weights are zero (k-th neighbour at distance 0)")
            w = bisquare_weight(dist[i], b[i])
            key = (zid,)
        rows = np.flatnonzero(w > 0)
        wr = w[rows]
        cfg = config
        train_w = wr
        held = np.zeros(0, dtype=np.int64)
        if oob == "holdout":
            rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(config.seed), *key, 1])))
            n_out = int(round((1.0 - config.subsample) * rows.size))
            held = np.sort(rng.permutation(rows.size)[:n_out])
            train_w = wr.copy()
            train_w[held] = 0.0
            cfg = replace(config, subsample=1.0)
        try:
            model = fit(X[rows], y[rows], train_w, cfg, names=names, seed_key=key)
        except ValueError as e:
            raise LocalFitError(zid, e) from e
        pred_rows = predict(model, X[rows])
        pos_self = np.searchsorted(rows, i)
        pred_i = float(pred_rows[pos_self]) if pos_self < rows.size and rows[pos_self] == i else float(predict(model, X[i:i + 1])[0])
        if oob == "holdout":
            oob_rows, oob_pred = rows[held], pred_rows[held]
        elif model.oob is not None:
            oob_rows, oob_pred = rows[model.oob.final_rows], model.oob.final_pred
        else:
            oob_rows, oob_pred = np.zeros(0, dtype=np.int64), np.zeros(0)
        return LocalModel(zid, model, rows, wr, pred_i, float(_weighted_r2(y[rows], pred_rows, wr)), oob_rows, oob_pred)

    models = _run(one, range(n), n_jobs)
    return LocalModelSet(zone_ids, models, k if kernel == "bisquare" else None, config, oob, y)


@dataclass
class BandwidthTrace:
    best: int
    rmse: dict[int, float]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "loo_rmse", "selected"])
            for k, r in self.rmse.items():
                w.writerow([k, repr(r), int(k == self.best)])


def loo_bandwidth(X, y, coords, candidates: Sequence[int] = DEFAULT_CANDIDATES, config: FitConfig = FitConfig(),
                  zone_ids=None, n_jobs: int = 1) -> BandwidthTrace:
    """Leave-one-out RMSE for each candidate neighbour count.

    Location i is predicted by a model trained on the same kernel as the
    final fit (radius = distance to its k-th nearest location, self
    included) with row i removed. Ties go to the smaller k.
    """
    X, y, coords, zone_ids, _ = _prepare(X, y, coords, zone_ids, None)
    n = X.shape[0]
    ks = []
    for k in sorted({int(c) for c in candidates}):
        if k >= n:
            warnings.warn(f"bandwidth candidate k={k} >= n={n} skipped", stacklevel=2)
        elif k < 10:
            raise ValueError(f"bandwidth candidates must be >= 10, got {k}")
        else:
            ks.append(k)
    if not ks:
        raise ValueError("no usable bandwidth candidates")
    dist = cdist(coords, coords)
    # rows sorted by distance once; ties resolve by row index
    order = np.argsort(dist, axis=1, kind="stable")
    rmse = {}
    for k in ks:
        def one(i):
            b = dist[i, order[i, k - 1]]
            rows = np.sort(order[i, :k])
            rows = rows[rows != i]
            w = bisquare_weight(dist[i, rows], b) if b > 0 else np.zeros(rows.size)
            keep = w > 0
            rows, w = rows[keep], w[keep]
            if rows.size < 2:
                raise LocalFitError(int(zone_ids[i]), f"fewer than 2 weighted neighbours at k={k}")
            model = fit(X[rows], y[rows], w, config, seed_key=(int(zone_ids[i]),))
            return float(predict(model, X[i:i + 1])[0])

        pred = np.array(_run(one, range(n), n_jobs))
        rmse[k] = float(math.sqrt(np.mean((y - pred) ** 2)))
    best = min(ks, key=lambda k: (rmse[k], k))
    return BandwidthTrace(best, rmse)


def global_oob(lms: LocalModelSet) -> Metrics:
    """R², MAE and RMSE over every location's pooled pseudo-OOB predictions."""
    if lms.config.subsample >= 1 or any(m.oob_rows.size == 0 for m in lms.models):
        raise ValueError("no OOB instances: refit with subsample < 1")
    rows = np.concatenate([m.oob_rows for m in lms.models])
    pred = np.concatenate([m.oob_pred for m in lms.models])
    return regression_metrics(lms.y[rows], pred)


def residual_moran(lms: LocalModelSet, w: SpatialWeights, permutations: int = 999, seed: int = 0) -> MoranResult:
    """Global Moran's I of the standardized residuals, reordered to the weights' zone order."""
    pos = {int(z): i for i, z in enumerate(lms.zone_ids)}
    missing = [int(z) for z in w.ids if int(z) not in pos]
    if missing or len(w.ids) != len(pos):
        raise ValueError(f"weights and local models cover different zones (e.g. {missing[:5]})")
    r = lms.std_residuals[[pos[int(z)] for z in w.ids]]
    return global_moran(r, w, permutations, seed)
