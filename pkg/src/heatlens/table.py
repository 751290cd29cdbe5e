"""Per-zone feature table: zone ids, centroids and named numeric columns."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np


@dataclass
class FeatureTable:
    """Rows keyed by ``zone_id``; missing values are NaN.

    Centroids may be NaN only while a table is being assembled from parts
    (e.g. a socio-economic CSV without coordinates); :meth:`coords` refuses
    non-finite centroids.
    """

    zone_ids: np.ndarray
    columns: dict[str, np.ndarray] = field(default_factory=dict)
    centroid_x: np.ndarray | None = None
    centroid_y: np.ndarray | None = None

    def __post_init__(self):
        self.zone_ids = np.asarray(self.zone_ids, dtype=np.int64)
        n = self.zone_ids.size
        if len(np.unique(self.zone_ids)) != n:
            raise ValueError("duplicate zone_id in feature table")
        if self.centroid_x is None:
            self.centroid_x = np.full(n, np.nan)
        if self.centroid_y is None:
            self.centroid_y = np.full(n, np.nan)
        self.centroid_x = np.asarray(self.centroid_x, dtype=np.float64)
        self.centroid_y = np.asarray(self.centroid_y, dtype=np.float64)
        cols = {}
        for name, vals in self.columns.items():
            arr = np.asarray(vals, dtype=np.float64)
            if arr.shape != (n,):
                raise ValueError(f"column {name!r} has shape {arr.shape}, expected ({n},)")
            cols[name] = arr
        self.columns = cols

    def __len__(self):
        return self.zone_ids.size

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.columns[name]
        except KeyError:
            raise KeyError(f"no column {name!r} in feature table") from None

    def __contains__(self, name: str) -> bool:
        return name in self.columns

    @property
    def names(self) -> list[str]:
        return list(self.columns)

    def coords(self) -> np.ndarray:
        xy = np.column_stack([self.centroid_x, self.centroid_y])
        if not np.all(np.isfinite(xy)):
            raise ValueError("feature table has non-finite centroids")
        return xy

    def matrix(self, names: Iterable[str]) -> np.ndarray:
        names = list(names)
        missing = [n for n in names if n not in self.columns]
        if missing:
            raise KeyError(f"missing feature(s): {', '.join(missing)}")
        return np.column_stack([self.columns[n] for n in names]) if names else np.empty((len(self), 0))

    def with_columns(self, columns: Mapping[str, np.ndarray]) -> "FeatureTable":
        merged = dict(self.columns)
        merged.update(columns)
        return FeatureTable(self.zone_ids.copy(), merged, self.centroid_x.copy(), self.centroid_y.copy())

    def row_index(self, zone_ids) -> np.ndarray:
        lookup = {int(z): i for i, z in enumerate(self.zone_ids)}
        try:
            return np.array([lookup[int(z)] for z in zone_ids], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"zone_id {exc.args[0]} not in feature table") from None

    def select(self, zone_ids) -> "FeatureTable":
        idx = self.row_index(zone_ids)
        return FeatureTable(
            self.zone_ids[idx],
            {k: v[idx] for k, v in self.columns.items()},
            self.centroid_x[idx],
            self.centroid_y[idx],
        )

    def join(self, other: "FeatureTable") -> "FeatureTable":
        """Left join on zone_id; zones absent from ``other`` get NaN.

        Centroids from ``other`` fill in where this table has none.
        """
        lookup = {int(z): i for i, z in enumerate(other.zone_ids)}
        idx = np.array([lookup.get(int(z), -1) for z in self.zone_ids])
        hit = idx >= 0
        cols = dict(self.columns)
        for name, vals in other.columns.items():
            col = np.full(len(self), np.nan)
            col[hit] = vals[idx[hit]]
            cols[name] = col
        cx, cy = self.centroid_x.copy(), self.centroid_y.copy()
        fill = hit & ~np.isfinite(cx)
        cx[fill] = other.centroid_x[idx[fill]]
        cy[fill] = other.centroid_y[idx[fill]]
        return FeatureTable(self.zone_ids.copy(), cols, cx, cy)

    def complete_rows(self, names: Iterable[str]) -> np.ndarray:
        """Boolean mask of rows with every named column finite."""
        return np.all(np.isfinite(self.matrix(names)), axis=1)

    def to_csv(self, path, columns: Iterable[str] | None = None) -> None:
        names = self.names if columns is None else list(columns)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["zone_id", "centroid_x", "centroid_y", *names])
            for i, z in enumerate(self.zone_ids):
                w.writerow([int(z), _cell(self.centroid_x[i]), _cell(self.centroid_y[i])]
                           + [_cell(self.columns[n][i]) for n in names])

    @classmethod
    def from_csv(cls, path) -> "FeatureTable":
        """Read a CSV with a ``zone_id`` column; ``centroid_x``/``centroid_y`` are optional."""
        with open(Path(path), newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{path}: empty table")
        if "zone_id" not in rows[0]:
            raise ValueError(f"{path}: missing 'zone_id' column")
        ids = [int(r["zone_id"]) for r in rows]
        names = [k for k in rows[0] if k not in ("zone_id", "centroid_x", "centroid_y")]
        cols = {n: np.array([_parse(r[n]) for r in rows]) for n in names}
        cx = np.array([_parse(r.get("centroid_x", "")) for r in rows])
        cy = np.array([_parse(r.get("centroid_y", "")) for r in rows])
        return cls(np.array(ids), cols, cx, cy)


def _cell(v: float) -> str:
    return "" if not np.isfinite(v) else repr(float(v))


def _parse(s) -> float:
    if s is None or s.strip() == "" or s.strip().lower() in ("nan", "na"):
        return np.nan
    return float(s)
