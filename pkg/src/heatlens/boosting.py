"""Weighted gradient-boosted regression trees with squared-error loss.

Trees are grown by exact greedy search over sorted feature values with
midpoint thresholds. Sample weights fold into the gradients and hessians,
so a weight of 2 behaves like a duplicated row.
"""

from __future__ import annotations

import itertools
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator, Mapping, Sequence

import numpy as np

from ._trees import boost, predict_forest
from .table import FeatureTable


@dataclass(frozen=True)
class FitConfig:
    n_estimators: int = 500
    learning_rate: float = 0.05
    max_depth: int = 2
    subsample: float = 0.8
    reg_lambda: float = 1.0
    gamma: float = 0.0
    min_child_weight: float = 1.0  # summed instance weight per child
    seed: int = 0

    def __post_init__(self):
        if int(self.n_estimators) != self.n_estimators or self.n_estimators < 1:
            raise ValueError(f"n_estimators must be an integer >= 1, got {self.n_estimators}")
        if not 0 < self.learning_rate <= 1:
            raise ValueError(f"learning_rate must be in (0, 1], got {self.learning_rate}")
        if int(self.max_depth) != self.max_depth or self.max_depth < 1:
            raise ValueError(f"max_depth must be an integer >= 1, got {self.max_depth}")
        if not 0 < self.subsample <= 1:
            raise ValueError(f"subsample must be in (0, 1], got {self.subsample}")
        if self.reg_lambda < 0 or self.gamma < 0 or self.min_child_weight < 0:
            raise ValueError("reg_lambda, gamma and min_child_weight must be >= 0")

    @classmethod
    def from_mapping(cls, m: Mapping) -> "FitConfig":
        m = dict(m)
        if "lambda" in m:
            m["reg_lambda"] = m.pop("lambda")
        unknown = set(m) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown fit options: {sorted(unknown)}")
        return cls(**m)


@dataclass(frozen=True)
class TreeNode:
    split_feature: int  # -1 on leaves
    threshold: float
    left: int
    right: int
    leaf_value: float
    split_gain: float
    cover: float

    @property
    def is_leaf(self) -> bool:
        return self.split_feature < 0


@dataclass(frozen=True)
class Tree:
    """Flat node arrays; node 0 is the root."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray
    cover: np.ndarray

    def __len__(self):
        return self.feature.size

    def nodes(self) -> Iterator[TreeNode]:
        for k in range(len(self)):
            yield TreeNode(int(self.feature[k]), float(self.threshold[k]), int(self.left[k]), int(self.right[k]),
                           float(self.value[k]), float(self.gain[k]), float(self.cover[k]))

    def leaf_index(self, X: np.ndarray) -> np.ndarray:
        out = np.empty(X.shape[0], dtype=np.int64)
        for i, row in enumerate(X):
            k = 0
            while self.feature[k] >= 0:
                k = self.left[k] if row[self.feature[k]] < self.threshold[k] else self.right[k]
            out[i] = k
        return out


@dataclass
class OobRecord:
    """Held-out rows of each subsampled iteration, scored right after that tree was added."""

    rmse: np.ndarray  # per iteration, NaN when nothing was held out
    final_rows: np.ndarray  # indices into the training rows
    final_pred: np.ndarray


@dataclass
class BoostedModel:
    base_score: float
    trees: list[Tree]
    learning_rate: float
    feature_names: list[str]
    config: FitConfig
    loss_trace: np.ndarray | None = None  # weighted training MSE, base score first
    oob: OobRecord | None = None
    _packed: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def _pack(self):
        if self._packed is None:
            sizes = [len(t) for t in self.trees]
            offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
            cat = (lambda a, dt: np.concatenate([getattr(t, a) for t in self.trees]).astype(dt)
                   if self.trees else np.zeros(0, dtype=dt))
            self._packed = (offsets, cat("feature", np.int64), cat("threshold", np.float64),
                            cat("left", np.int64), cat("right", np.int64), cat("value", np.float64))
        return self._packed

    def predict(self, X) -> np.ndarray:
        return predict(self, X)


def _as_matrix(X, names: Sequence[str] | None) -> tuple[np.ndarray, list[str]]:
    if isinstance(X, FeatureTable):
        names = X.names if names is None else list(names)
        return X.matrix(names), names
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValueError("X must be a 2-D array")
    if names is None:
        names = [f"x{j}" for j in range(X.shape[1])]
    elif len(names) != X.shape[1]:
        raise ValueError(f"{len(names)} feature names for {X.shape[1]} columns")
    return X, list(names)


def _check_training(X, y, sample_weights):
    n = X.shape[0]
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.size != n:
        raise ValueError(f"X has {n} rows but y has {y.size}")
    if n < 2:
        raise ValueError(f"need at least 2 rows to fit, got {n}")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains missing or non-finite values; impute upstream")
    if not np.all(np.isfinite(y)):
        raise ValueError("y contains missing or non-finite values")
    w = np.ones(n) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64).ravel()
    if w.size != n:
        raise ValueError(f"{w.size} sample weights for {n} rows")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("sample weights must be finite and >= 0")
    if not w.sum() > 0:
        raise ValueError("sample weights sum to zero")
    return y, w


def weighted_mean(y: np.ndarray, w: np.ndarray) -> float:
    # anchoring on a weighted row keeps a constant target exact
    keep = w > 0
    y, w = y[keep], w[keep]
    y0 = y[0]
    return float(y0 + np.dot(w, y - y0) / w.sum())


def fit(X, y, sample_weights=None, config: FitConfig = FitConfig(), names: Sequence[str] | None = None,
        seed_key: Sequence[int] = ()) -> BoostedModel:
    """Boost ``config.n_estimators`` trees on (X, y).

    Rows with zero weight take no part in tree growth. When ``subsample < 1``
    each tree sees a fresh draw without replacement, and the rows left out
    are scored into :attr:`BoostedModel.oob`. ``seed_key`` extends the seed
    so related fits get independent but reproducible streams.
    """
    X, names = _as_matrix(X, names)
    X = np.ascontiguousarray(X, dtype=np.float64)
    y, w = _check_training(X, y, sample_weights)
    n = X.shape[0]
    cfg = config
    base = weighted_mean(y, w)
    order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T.astype(np.int64))
    positive = np.flatnonzero(w > 0)
    m = max(1, int(round(cfg.subsample * positive.size)))
    subsampled = cfg.subsample < 1
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(cfg.seed), *map(int, seed_key)])))

    active = np.zeros((cfg.n_estimators, n), dtype=np.bool_)
    if subsampled:
        for t in range(cfg.n_estimators):
            active[t, positive[rng.permutation(positive.size)[:m]]] = True
    else:
        active[:, positive] = True
    feat, thr, lft, rgt, val, gn, cov, sizes, loss, oob_rmse, pred = boost(
        X, order, y, w, base, active, float(cfg.learning_rate), int(cfg.max_depth), float(cfg.reg_lambda),
        float(cfg.gamma), float(cfg.min_child_weight))
    trees = [Tree(feat[t, :k].copy(), thr[t, :k].copy(), lft[t, :k].copy(), rgt[t, :k].copy(), val[t, :k].copy(),
                  gn[t, :k].copy(), cov[t, :k].copy()) for t, k in enumerate(sizes)]
    oob = None
    if subsampled:
        held = positive[~active[-1, positive]]
        oob = OobRecord(oob_rmse, held, pred[held].copy())
    return BoostedModel(base, trees, float(cfg.learning_rate), names, cfg, loss, oob)


def predict(model: BoostedModel, X) -> np.ndarray:
    """Route each row through every tree: ``value < threshold`` goes left."""
    if isinstance(X, FeatureTable) or isinstance(X, Mapping):
        have = X.names if isinstance(X, FeatureTable) else list(X)
        missing = [f for f in model.feature_names if f not in have]
        if missing:
            raise ValueError(f"feature schema mismatch; missing features: {missing}")
        M = np.column_stack([np.asarray(X[f], dtype=np.float64) for f in model.feature_names])
    else:
        M = np.asarray(X, dtype=np.float64)
        if M.ndim == 1:
            M = M[None, :] if model.n_features > 1 else M[:, None]
        if M.shape[1] != model.n_features:
            raise ValueError(f"feature schema mismatch; expected {model.n_features} columns "
                             f"{model.feature_names}, got {M.shape[1]}")
    M = np.ascontiguousarray(M, dtype=np.float64)
    if not model.trees:
        return np.full(M.shape[0], model.base_score)
    return predict_forest(M, *model._pack(), model.base_score, model.learning_rate)


def gain_importance(model: BoostedModel) -> dict[str, float]:
    """Total split gain per feature over all trees."""
    tot = np.zeros(model.n_features)
    for t in model.trees:
        internal = t.feature >= 0
        np.add.at(tot, t.feature[internal], t.gain[internal])
    return {name: float(v) for name, v in zip(model.feature_names, tot)}


@dataclass(frozen=True)
class Metrics:
    r2: float
    mae: float
    rmse: float


def regression_metrics(y, yhat) -> Metrics:
    y = np.asarray(y, dtype=np.float64)
    e = y - np.asarray(yhat, dtype=np.float64)
    sst = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(e * e) / sst if sst > 0 else math.nan
    return Metrics(float(r2), float(np.mean(np.abs(e))), float(math.sqrt(np.mean(e * e))))


def expand_grid(base: FitConfig, lattice: Mapping[str, Sequence]) -> list[FitConfig]:
    """Every combination of the lattice values applied over ``base`` (keys in sorted order)."""
    keys = sorted(lattice)
    return [FitConfig.from_mapping({**asdict(base), **dict(zip(keys, combo))})
            for combo in itertools.product(*(lattice[k] for k in keys))]


@dataclass
class NestedCvResult:
    best: FitConfig
    winners: list[FitConfig]  # one per outer fold
    outer: list[Metrics]

    def summary(self) -> dict[str, tuple[float, float]]:
        out = {}
        for name in ("r2", "mae", "rmse"):
            v = np.array([getattr(m, name) for m in self.outer])
            out[name] = (float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0)
        return out


def kfold_indices(n: int, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    return [np.sort(f) for f in np.array_split(rng.permutation(n), k)]


def nested_cv(X, y, grid: Sequence[FitConfig] | Mapping[str, Sequence], outer_folds: int = 5,
              inner_folds: int = 5, seed: int = 0, base: FitConfig = FitConfig(),
              sample_weights=None) -> NestedCvResult:
    """Grid search by inner-fold RMSE inside each outer fold, scored on the outer test split.

    ``grid`` is a list of configs or a lattice of option values over ``base``.
    The final config is the most frequent fold winner; ties go to the lowest
    mean outer RMSE among the folds it won.
    """
    configs = expand_grid(base, grid) if isinstance(grid, Mapping) else list(grid)
    if not configs:
        raise ValueError("hyperparameter grid is empty")
    X, _ = _as_matrix(X, None)
    y = np.asarray(y, dtype=np.float64).ravel()
    w = np.ones(y.size) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    n = y.size
    if n < outer_folds * 2:
        raise ValueError(f"need at least {outer_folds * 2} rows for {outer_folds} outer folds, got {n}")
    ss = np.random.SeedSequence(seed)
    outer_rng, *inner_seeds = [np.random.default_rng(s) for s in ss.spawn(outer_folds + 1)]
    folds = kfold_indices(n, outer_folds, outer_rng)

    winners, outer, outer_rmse = [], [], []
    for o, test in enumerate(folds):
        train = np.setdiff1d(np.arange(n), test)
        inner = kfold_indices(train.size, inner_folds, inner_seeds[o])
        best_cfg, best_rmse = None, math.inf
        for cfg in configs:
            sq, cnt = 0.0, 0
            for fold in inner:
                va = train[fold]
                tr = np.setdiff1d(train, va)
                model = fit(X[tr], y[tr], w[tr], cfg)
                e = y[va] - predict(model, X[va])
                sq += float(e @ e)
                cnt += va.size
            rmse = math.sqrt(sq / cnt)
            if rmse < best_rmse:
                best_cfg, best_rmse = cfg, rmse
        model = fit(X[train], y[train], w[train], best_cfg)
        met = regression_metrics(y[test], predict(model, X[test]))
        winners.append(best_cfg)
        outer.append(met)
        outer_rmse.append(met.rmse)

    counts = Counter(winners)
    top = max(counts.values())
    tied = [c for c in configs if counts.get(c) == top]
    mean_rmse = {c: np.mean([r for wc, r in zip(winners, outer_rmse) if wc == c]) for c in tied}
    best = min(tied, key=lambda c: mean_rmse[c])
    return NestedCvResult(best, winners, outer)


FORMAT = "heatlens-boosted-trees"


def model_to_dict(model: BoostedModel) -> dict:
    return {
        "format": FORMAT,
        "version": 1,
        "base_score": repr(model.base_score),
        "learning_rate": repr(model.learning_rate),
        "feature_names": list(model.feature_names),
        "config": asdict(model.config),
        "trees": [
            {
                "feature": t.feature.tolist(),
                "threshold": [repr(float(v)) for v in t.threshold],
                "left": t.left.tolist(),
                "right": t.right.tolist(),
                "value": [repr(float(v)) for v in t.value],
                "gain": [repr(float(v)) for v in t.gain],
                "cover": [repr(float(v)) for v in t.cover],
            }
            for t in model.trees
        ],
    }


def model_from_dict(d: Mapping) -> BoostedModel:
    if d.get("format") != FORMAT:
        raise ValueError(f"not a {FORMAT} document")
    f = lambda xs: np.array([float(v) for v in xs], dtype=np.float64)
    i = lambda xs: np.array(xs, dtype=np.int64)
    trees = [Tree(i(t["feature"]), f(t["threshold"]), i(t["left"]), i(t["right"]), f(t["value"]),
                  f(t["gain"]), f(t["cover"])) for t in d["trees"]]
    return BoostedModel(float(d["base_score"]), trees, float(d["learning_rate"]), list(d["feature_names"]),
                        FitConfig(**d["config"]))


def save_model(model: BoostedModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=1)


def load_model(path) -> BoostedModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))


def with_trees(model: BoostedModel, n: int) -> BoostedModel:
    """The model truncated to its first ``n`` trees."""
    return replace(model, trees=model.trees[:n], loss_trace=None, oob=None, _packed=None)
