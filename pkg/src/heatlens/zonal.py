"""Zonal aggregation and the LST/UTCI comparison analytics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .raster import Grid, require_aligned
from .table import FeatureTable

QUANTILE_METHOD = "linear"  # type 7: interpolate between order statistics


@dataclass
class ZonalStats:
    zone_ids: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    count: np.ndarray
    centroid_x: np.ndarray
    centroid_y: np.ndarray


def zonal_stats(grid: Grid, zone_raster: Grid, masks: Sequence[Grid] = ()) -> ZonalStats:
    """Mean, sample sd (N-1) and cell count per zone.

    Cells where any mask is 1 (or the grid is nodata) are dropped first.
    Zones left with no cells get NaN and count 0; a single remaining cell
    has NaN sd. Centroids are the mean of each zone's cell centres before
    masking.
    """
    require_aligned(grid, zone_raster, *masks)
    zvals = zone_raster.values
    zvalid = zone_raster.mask
    ids = np.unique(zvals[zvalid]).astype(np.int64)
    pos = np.searchsorted(ids, np.where(zvalid, zvals, ids[0] if ids.size else 0).astype(np.int64))

    keep = zvalid & grid.mask
    for m in masks:
        keep &= ~(m.mask & (m.values == 1))
    vals = np.where(keep, grid.values, 0.0)
    n = ids.size
    count = np.bincount(pos[keep], minlength=n).astype(np.int64)
    total = np.bincount(pos[keep], weights=vals[keep], minlength=n)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, total / np.maximum(count, 1), np.nan)
        dev = np.where(keep, grid.values - mean[pos], 0.0)
        ss = np.bincount(pos[keep], weights=dev[keep] ** 2, minlength=n)
        sd = np.where(count > 1, np.sqrt(ss / np.maximum(count - 1, 1)), np.nan)

    x, y = zone_raster.cell_centers()
    cells = np.bincount(pos[zvalid], minlength=n)
    cx = np.bincount(pos[zvalid], weights=x[zvalid], minlength=n) / np.maximum(cells, 1)
    cy = np.bincount(pos[zvalid], weights=y[zvalid], minlength=n) / np.maximum(cells, 1)
    return ZonalStats(ids, mean, sd, count, cx, cy)


def zonal_table(grids: Mapping[str, Grid], zone_raster: Grid, masks: Mapping[str, Sequence[Grid]] | None = None,
                ) -> FeatureTable:
    """Per-zone means of several rasters as a feature table, one ``<name>`` column each.

    ``masks`` maps a raster name to the masks applied to it only.
    """
    masks = masks or {}
    cols = {}
    base = None
    for name, g in grids.items():
        st = zonal_stats(g, zone_raster, masks.get(name, ()))
        if base is None:
            base = st
        cols[name] = st.mean
    if base is None:
        raise ValueError("no grids to aggregate")
    return FeatureTable(base.zone_ids, cols, base.centroid_x, base.centroid_y)


def water_mask(landcover: Grid, water_classes: Sequence[int]) -> Grid:
    """1 where the land-cover class is one of ``water_classes``."""
    return landcover.with_values((np.isin(landcover.values, list(water_classes)) & landcover.mask) * 1.0)


def rooftop_mask(building_height: Grid) -> Grid:
    """1 on building footprints (height > 0)."""
    return building_height.with_values(((building_height.values > 0) & building_height.mask) * 1.0)


# ---------------------------------------------------------------- LST vs UTCI


def _complete(table: FeatureTable, lst: str, utci: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    a, b = table[lst], table[utci]
    ok = np.isfinite(a) & np.isfinite(b)
    return a, b, ok


def standardized_mismatch(table: FeatureTable, lst: str = "LST_mean", utci: str = "UTCI_mean") -> np.ndarray:
    """``|z(LST) - z(UTCI)|`` per zone with population-sd z-scores over complete rows.

    Zones missing either target get NaN.
    """
    a, b, ok = _complete(table, lst, utci)
    if ok.sum() < 2:
        raise ValueError("need at least two zones with both targets")
    out = np.full(len(table), np.nan)
    za = _zscore(a[ok], lst)
    zb = _zscore(b[ok], utci)
    out[ok] = np.abs(za - zb)
    return out


def _zscore(v: np.ndarray, name: str) -> np.ndarray:
    mu = v.mean()
    sd = math.sqrt(float(np.mean((v - mu) ** 2)))
    if not sd > 1e-12 * max(1.0, abs(mu)):
        raise ValueError(f"degenerate target {name!r}: zero variance")
    return (v - mu) / sd


BIVARIATE_CORNERS = {
    (1, 1): "low LST, low UTCI: cool and comfortable",
    (3, 3): "high LST, high UTCI: severe, compounding thermal risk",
    (3, 1): "high LST, low UTCI: hot surfaces, mitigated heat stress",
    (1, 3): "low LST, high UTCI: cool surfaces, severe pedestrian heat stress",
}


def quantile_bins(v: np.ndarray, n_bins: int = 3) -> np.ndarray:
    """1-based bin per value from type-7 quantile cut points; a value on a cut goes to the lower bin."""
    cuts = np.quantile(v, np.arange(1, n_bins) / n_bins, method=QUANTILE_METHOD)
    return np.searchsorted(cuts, v, side="left") + 1


def bivariate_class(table: FeatureTable, lst: str = "LST_mean", utci: str = "UTCI_mean",
                    n_bins: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """(LST bin, UTCI bin) per zone, each in 1..n_bins; 0 where a target is missing."""
    a, b, ok = _complete(table, lst, utci)
    if ok.sum() < n_bins:
        raise ValueError(f"too few zones for {n_bins} bins: {int(ok.sum())}")
    for v, name in ((a, lst), (b, utci)):
        if np.unique(v[ok]).size < n_bins:
            raise ValueError(f"{name!r} needs at least {n_bins} distinct values")
    la = np.zeros(len(table), dtype=np.int64)
    lb = np.zeros(len(table), dtype=np.int64)
    la[ok] = quantile_bins(a[ok], n_bins)
    lb[ok] = quantile_bins(b[ok], n_bins)
    return la, lb


def write_mismatch_csv(table: FeatureTable, path, lst: str = "LST_mean", utci: str = "UTCI_mean",
                       n_bins: int = 3) -> None:
    """``zone_id,lst_mean,utci_mean,z_mismatch,biv_class`` with classes written as ``<lst>-<utci>``."""
    z = standardized_mismatch(table, lst, utci)
    la, lb = bivariate_class(table, lst, utci, n_bins)
    fmt = lambda v: "" if not np.isfinite(v) else repr(float(v))  # noqa: E731
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["zone_id", "lst_mean", "utci_mean", "z_mismatch", "biv_class"])
        for i, zid in enumerate(table.zone_ids):
            cls = f"{la[i]}-{lb[i]}" if la[i] else ""
            w.writerow([int(zid), fmt(table[lst][i]), fmt(table[utci][i]), fmt(z[i]), cls])


# ---------------------------------------------------------------- curves


@dataclass
class BinnedSummary:
    edges: np.ndarray
    median: np.ndarray
    q25: np.ndarray
    q75: np.ndarray
    count: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])


def binned_median_iqr(x, y, n_bins: int) -> BinnedSummary:
    """Median and quartiles of ``y`` in equal-width bins of ``x``; the last bin includes its right edge."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError("x and y must have equal length")
    ok = np.isfinite(x) & np.isfinite(y)
    x, y = x[ok], y[ok]
    if x.size == 0:
        raise ValueError("empty input")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, n_bins - 1)
    med = np.full(n_bins, np.nan)
    q25 = np.full(n_bins, np.nan)
    q75 = np.full(n_bins, np.nan)
    count = np.bincount(idx, minlength=n_bins)
    for b in range(n_bins):
        if count[b]:
            q25[b], med[b], q75[b] = np.quantile(y[idx == b], [0.25, 0.5, 0.75], method=QUANTILE_METHOD)
    return BinnedSummary(edges, med, q25, q75, count)


def lowess(x, y, frac: float = 2.0 / 3.0, iterations: int = 3) -> np.ndarray:
    """Robust locally weighted linear smoother, fitted value at each input x.

    Each fit uses the ``floor(frac * n)`` nearest neighbours with tricube
    weights, followed by ``iterations`` bisquare reweighting passes on
    residuals scaled by six median absolute residuals.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    n = x.size
    if y.size != n:
        raise ValueError("x and y must have equal length")
    if n < 3:
        raise ValueError("lowess needs at least 3 points")
    if not 0 < frac <= 1:
        raise ValueError("frac must lie in (0, 1]")
    k = int(frac * n + 1e-10)
    if k < 2:
        raise ValueError(f"frac={frac} leaves fewer than 2 points per window")
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    robust = np.ones(n)
    fit = np.empty(n)
    for it in range(iterations + 1):
        left = 0
        for i in range(n):
            xi = xs[i]
            # slide the k-point window so that it stays the nearest neighbourhood of xi
            while left + k < n and xi - xs[left] > xs[left + k] - xi:
                left += 1
            right = left + k
            h = max(xi - xs[left], xs[right - 1] - xi)
            xw = xs[left:right]
            yw = ys[left:right]
            if h > 0:
                u = np.abs(xw - xi) / h
                w = np.where(u < 1.0, (1.0 - u ** 3) ** 3, 0.0)
            else:
                w = np.ones(k)
            w = w * robust[left:right]
            sw = w.sum()
            if sw <= 0:
                fit[i] = ys[i]
                continue
            w = w / sw
            xm = np.dot(w, xw)
            var = np.dot(w, (xw - xm) ** 2)
            if var > 1e-12 * max(1.0, h * h):
                slope = np.dot(w, (xw - xm) * yw) / var
                fit[i] = np.dot(w, yw) + slope * (xi - xm)
            else:
                fit[i] = np.dot(w, yw)
        if it == iterations:
            break
        resid = ys - fit
        s = np.median(np.abs(resid))
        if s <= 1e-12 * max(1.0, np.abs(ys).max()):
            break
        u = resid / (6.0 * s)
        robust = np.where(np.abs(u) < 1.0, (1.0 - u ** 2) ** 2, 0.0)
    out = np.empty(n)
    out[order] = fit
    return out
