"""Attributions for boosted models and smoothed dependence curves.

SHAP values use path-dependent conditioning: a feature outside the
coalition is integrated out with the training covers recorded at each
split. :func:`brute_shapley` enumerates coalitions under either that
conditioning or an interventional background and is the test oracle.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.interpolate import BSpline
from scipy.optimize import minimize_scalar

from ._shap import tree_shap_rows
from .boosting import BoostedModel, Tree, gain_importance, predict
from .table import FeatureTable


@dataclass
class ShapMatrix:
    values: np.ndarray  # rows x features, response units
    base_value: np.ndarray  # per row
    feature_names: list[str]
    X: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.X.shape or self.base_value.shape != (self.values.shape[0],):
            raise ValueError("SHAP values, base values and feature rows disagree in shape")


def _matrix_for(model: BoostedModel, X) -> np.ndarray:
    if isinstance(X, FeatureTable):
        missing = [f for f in model.feature_names if f not in X]
        if missing:
            raise ValueError(f"feature schema mismatch; missing features: {missing}")
        return X.matrix(model.feature_names)
    M = np.asarray(X, dtype=np.float64)
    if M.ndim == 1:
        M = M[None, :]
    if M.shape[1] != model.n_features:
        raise ValueError(f"feature schema mismatch; expected {model.n_features} columns, got {M.shape[1]}")
    return M


def _tree_expectation(t: Tree) -> float:
    leaves = t.feature < 0
    return float(np.dot(t.cover[leaves], t.value[leaves]) / t.cover[0])


def expected_value(model: BoostedModel) -> float:
    """Model output averaged over the training covers: the SHAP base value."""
    return model.base_score + model.learning_rate * sum(_tree_expectation(t) for t in model.trees)


def tree_shap(model: BoostedModel, X) -> ShapMatrix:
    """Exact path-dependent TreeSHAP, with shrinkage and base score folded in."""
    M = np.ascontiguousarray(_matrix_for(model, X), dtype=np.float64)
    if any(t.cover is None or t.cover.size != len(t) or not np.all(t.cover > 0) for t in model.trees):
        raise ValueError("model has no usable cover statistics; refit it to explain it")
    base = expected_value(model)
    if model.trees:
        offsets, feat, thr, lft, rgt, val = model._pack()
        cov = np.concatenate([t.cover for t in model.trees])
        depth = max(_depth(t) for t in model.trees)
        phi = tree_shap_rows(M, offsets, feat, thr, lft, rgt, val, cov, depth, model.learning_rate)
    else:
        phi = np.zeros_like(M)
    return ShapMatrix(phi, np.full(M.shape[0], base), list(model.feature_names), M)


def _depth(t: Tree) -> int:
    d = np.zeros(len(t), dtype=np.int64)
    for k in range(len(t)):
        if t.feature[k] >= 0:
            d[t.left[k]] = d[t.right[k]] = d[k] + 1
    return int(d.max())


def _path_expectation(t: Tree, x: np.ndarray, known: np.ndarray, node: int = 0) -> float:
    f = t.feature[node]
    if f < 0:
        return float(t.value[node])
    l, r = t.left[node], t.right[node]
    if known[f]:
        return _path_expectation(t, x, known, l if x[f] < t.threshold[node] else r)
    return (t.cover[l] * _path_expectation(t, x, known, l) + t.cover[r] * _path_expectation(t, x, known, r)) / t.cover[node]


def brute_shapley(model: BoostedModel, x, background=None, conditioning: str = "path") -> np.ndarray:
    """Shapley values by enumerating every coalition (p <= 12).

    ``conditioning="path"`` values a coalition S by the cover-weighted
    expectation over the features outside S, the game TreeSHAP solves.
    ``"interventional"`` averages predictions with S taken from x and the
    rest from each background row.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    p = model.n_features
    if p > 12:
        raise ValueError(f"brute-force Shapley supports at most 12 features, got {p}")
    if x.size != p:
        raise ValueError(f"expected {p} feature values, got {x.size}")
    if conditioning == "path":
        def v(mask):
            known = np.array(mask, dtype=bool)
            return model.base_score + model.learning_rate * sum(_path_expectation(t, x, known) for t in model.trees)
    elif conditioning == "interventional":
        if background is None:
            raise ValueError("interventional conditioning needs background rows")
        B = np.asarray(background, dtype=np.float64)

        def v(mask):
            Z = B.copy()
            cols = np.flatnonzero(mask)
            Z[:, cols] = x[cols]
            return float(predict(model, Z).mean())
    else:
        raise ValueError(f"conditioning must be 'path' or 'interventional', got {conditioning!r}")

    value = {}
    for mask in itertools.product((False, True), repeat=p):
        value[mask] = v(mask)
    phi = np.zeros(p)
    for i in range(p):
        for mask, val in value.items():
            if mask[i]:
                continue
            s = sum(mask)
            with_i = mask[:i] + (True,) + mask[i + 1:]
            phi[i] += math.factorial(s) * math.factorial(p - s - 1) / math.factorial(p) * (value[with_i] - val)
    return phi


@dataclass(frozen=True)
class ShapRank:
    feature: str
    mean_abs: float


def shap_summary(shap: ShapMatrix) -> list[ShapRank]:
    """Features by descending mean |phi|; equal values are ordered by name."""
    if shap.values.size == 0:
        raise ValueError("empty SHAP matrix")
    m = np.abs(shap.values).mean(axis=0)
    return sorted((ShapRank(f, float(v)) for f, v in zip(shap.feature_names, m)), key=lambda r: (-r.mean_abs, r.feature))


def write_shap_summary(shap: ShapMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "feature", "mean_abs_shap"])
        for i, r in enumerate(shap_summary(shap), 1):
            w.writerow([i, r.feature, repr(r.mean_abs)])


def write_dependence(shap: ShapMatrix, feature: str, path, color: str | None = None, zone_ids=None) -> None:
    """One row per sample: feature value, its SHAP value and optionally a colouring feature."""
    j = _feature_index(shap.feature_names, feature)
    c = _feature_index(shap.feature_names, color) if color else None
    ids = np.arange(shap.values.shape[0]) if zone_ids is None else np.asarray(zone_ids)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["zone_id", "x", "phi"] + ([f"color_{color}"] if c is not None else []))
        for i in range(shap.values.shape[0]):
            row = [int(ids[i]), repr(float(shap.X[i, j])), repr(float(shap.values[i, j]))]
            if c is not None:
                row.append(repr(float(shap.X[i, c])))
            w.writerow(row)


def _feature_index(names: Sequence[str], feature: str) -> int:
    try:
        return list(names).index(feature)
    except ValueError:
        raise ValueError(f"feature {feature!r} is not among the model features {list(names)}") from None


@dataclass
class LocalPrimary:
    zone_id: int
    primary_gain: str | None  # None when the local model never split
    primary_shap: str
    abs_shap: dict[str, float]
    signed_shap: float | None


def _argmax_name(values: dict[str, float]) -> str:
    return min(values, key=lambda f: (-values[f], f))


def local_importance_maps(lms, X, signed_feature: str | None = None) -> list[LocalPrimary]:
    """Per zone, gain and SHAP primacy from that zone's own model at its own feature row.

    ``X`` is a :class:`FeatureTable` keyed by zone id, or an array whose rows
    follow ``lms.zone_ids``.
    """
    names = lms.models[0].model.feature_names
    if signed_feature is not None:
        _feature_index(names, signed_feature)
    if isinstance(X, FeatureTable):
        lookup = {int(z): i for i, z in enumerate(X.zone_ids)}
        M = X.matrix(names) if all(f in X for f in names) else None
        if M is None:
            raise ValueError(f"feature schema mismatch; missing features: {[f for f in names if f not in X]}")
    else:
        M = np.asarray(X, dtype=np.float64)
        lookup = {int(z): i for i, z in enumerate(lms.zone_ids)}
        if M.shape[0] != len(lms.zone_ids):
            raise ValueError("feature rows must follow the local model zone order")
    out = []
    for m in lms.models:
        zid = int(m.zone_id)
        if zid not in lookup:
            raise ValueError(f"no feature row for zone {zid}")
        row = M[lookup[zid]]
        phi = tree_shap(m.model, row[None, :]).values[0]
        gains = gain_importance(m.model)
        abs_shap = {f: float(abs(v)) for f, v in zip(names, phi)}
        out.append(LocalPrimary(
            zid,
            _argmax_name(gains) if any(v > 0 for v in gains.values()) else None,
            _argmax_name(abs_shap),
            abs_shap,
            float(phi[names.index(signed_feature)]) if signed_feature else None,
        ))
    return out


def write_local_primary(records: Sequence[LocalPrimary], path, signed_feature: str | None = None) -> None:
    names = list(records[0].abs_shap) if records else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        head = ["zone_id", "primary_gain_feature", "primary_shap_feature"]
        if signed_feature:
            head.append(f"shap_{signed_feature}")
        w.writerow(head + [f"abs_shap_{f}" for f in names])
        for r in records:
            row = [r.zone_id, r.primary_gain or "", r.primary_shap]
            if signed_feature:
                row.append(repr(r.signed_shap))
            w.writerow(row + [repr(r.abs_shap[f]) for f in names])


@dataclass
class GamFit:
    knots: np.ndarray  # full knot vector, boundary knots repeated
    coef: np.ndarray
    lam: float
    edf: float
    gcv: float
    x_range: tuple[float, float]
    degree: int = 3

    def __call__(self, x) -> np.ndarray:
        x = np.clip(np.asarray(x, dtype=np.float64), *self.x_range)
        return BSpline(self.knots, self.coef, self.degree, extrapolate=False)(x)


def _knots(x: np.ndarray, n_knots: int, degree: int) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    inner = np.unique(np.quantile(x, np.linspace(0, 1, n_knots + 2)[1:-1]))
    inner = inner[(inner > lo) & (inner < hi)]
    return np.concatenate([[lo] * (degree + 1), inner, [hi] * (degree + 1)])


def _penalty(t: np.ndarray, degree: int) -> np.ndarray:
    """Second differences of coefficients divided by Greville spacing, so straight lines cost nothing."""
    k = t.size - degree - 1
    g = np.array([t[j + 1:j + degree + 1].mean() for j in range(k)])
    D1 = (np.eye(k)[1:] - np.eye(k)[:-1]) / np.diff(g)[:, None]
    return D1[1:] - D1[:-1]


def gam_fit(x, phi, n_knots: int = 10, lam: float | str = "gcv", degree: int = 3) -> GamFit:
    """Penalised cubic regression spline of ``phi`` on ``x``.

    Interior knots sit at quantiles of x. ``lam="gcv"`` picks the
    smoothing parameter minimising generalised cross-validation over a
    log-scale search; a number fixes it.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(phi, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError("x and phi must have the same length")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("x and phi must be finite")
    if x.size < n_knots + 4:
        raise ValueError(f"need at least n_knots + 4 = {n_knots + 4} points, got {x.size}")
    if x.min() == x.max():
        raise ValueError("degenerate x: all values are equal")
    t = _knots(x, n_knots, degree)
    B = BSpline.design_matrix(x, t, degree).toarray()
    D = _penalty(t, degree)
    BtB, Bty, DtD = B.T @ B, B.T @ y, D.T @ D
    scale = np.trace(BtB) / max(np.trace(DtD), 1e-300)
    n = x.size

    def solve(l):
        A = BtB + l * scale * DtD
        c = np.linalg.lstsq(A, Bty, rcond=None)[0]
        edf = float(np.trace(np.linalg.lstsq(A, BtB, rcond=None)[0]))
        rss = float(np.sum((y - B @ c) ** 2))
        return c, edf, rss

    def gcv(log_l):
        _, edf, rss = solve(10.0 ** log_l)
        return n * rss / max(n - edf, 1e-9) ** 2

    if lam == "gcv":
        grid = np.linspace(-8, 6, 57)
        scores = [gcv(v) for v in grid]
        i = int(np.argmin(scores))
        lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
        res = minimize_scalar(gcv, bounds=(lo, hi), method="bounded", options={"xatol": 1e-3})
        log_l = res.x if res.fun <= scores[i] else grid[i]
        lam_v = 10.0 ** log_l
    else:
        lam_v = float(lam)
        if lam_v < 0:
            raise ValueError("lambda must be >= 0")
    c, edf, rss = solve(lam_v)
    return GamFit(t, c, lam_v * scale, edf, n * rss / max(n - edf, 1e-9) ** 2, (float(x.min()), float(x.max())), degree)


def transition_point(fit: GamFit, resolution: int = 4001) -> float | None:
    """Smallest x in the data range where the fitted curve changes sign, or None.

    The curve is scanned on a regular grid and the first bracketing
    interval is refined by bisection to 1e-6 of the range.
    """
    lo, hi = fit.x_range
    g = np.linspace(lo, hi, resolution)
    s = np.sign(fit(g))
    nz = np.flatnonzero(s != 0)
    for a, b in zip(nz, nz[1:]):
        if s[a] == s[b]:
            continue
        if b - a > 1:
            return float(g[a + 1])  # the curve touches zero exactly on the grid
        xa, xb, sa = g[a], g[b], s[a]
        tol = 1e-6 * (hi - lo)
        while xb - xa > tol:
            mid = 0.5 * (xa + xb)
            sm = np.sign(fit(mid))
            if sm == 0:
                return float(mid)
            if sm == sa:
                xa = mid
            else:
                xb = mid
        return float(0.5 * (xa + xb))
    return None


def write_transition_points(rows: Sequence[tuple[str, str, float | None, GamFit]], path) -> None:
    """Rows of (target, feature, x*, fit); a missing crossing is left blank."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["target", "feature", "transition_x", "lambda", "edf"])
        for target, feature, xs, fit in rows:
            w.writerow([target, feature, "" if xs is None else repr(float(xs)), repr(float(fit.lam)), repr(float(fit.edf))])


def write_outputs(shap: ShapMatrix, outdir, features: Sequence[str] = (), color: str | None = None,
                  zone_ids=None) -> None:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    write_shap_summary(shap, out / "shap_summary.csv")
    for f in features:
        write_dependence(shap, f, out / f"shap_dependence_{f}.csv", color if color != f else None, zone_ids)
