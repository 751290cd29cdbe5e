"""Patch labelling and FRAGSTATS-style landscape indices on a class raster."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy import ndimage

from .raster import Grid, require_aligned

CLASS_METRICS = ("PLAND", "PD", "LSI", "COHESION", "PAFRAC", "CONTIG_AM")
LANDSCAPE_METRICS = ("PD", "LSI", "CONTAG", "SHDI", "SHEI")

# 3x3 contiguity template; its entries sum to 13
CONTIG_TEMPLATE = np.array([[1, 2, 1], [2, 1, 2], [1, 2, 1]])
_NODATA_CLASS = np.iinfo(np.int64).min


@dataclass(frozen=True)
class PatchRecord:
    patch_id: int
    cls: int
    n_cells: int
    n_edges: int  # cell sides on the patch boundary
    area: float  # m2
    perimeter: float  # m
    contiguity: float


@dataclass
class PatchLabeling:
    """Connected patches of a class grid. ``patch_ids`` is 0 on nodata, ids start at 1."""

    class_grid: Grid
    patch_ids: np.ndarray
    connectivity: int
    patches: list[PatchRecord] = field(default_factory=list)

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.class_grid.values[self.class_grid.mask]).astype(np.int64)

    def class_patches(self, cls: int) -> list[PatchRecord]:
        return [p for p in self.patches if p.cls == cls]

    @property
    def n_cells(self) -> int:
        return int(self.class_grid.mask.sum())

    @property
    def total_area(self) -> float:
        return self.n_cells * self.class_grid.cell_size ** 2


def _class_codes(grid: Grid) -> np.ndarray:
    vals = grid.values
    valid = grid.mask
    if np.any(vals[valid] != np.round(vals[valid])):
        raise ValueError("class grid must hold integer class codes")
    return np.where(valid, vals, 0).astype(np.int64), valid


def _shift(a: np.ndarray, dr: int, dc: int, fill) -> np.ndarray:
    """Value of the neighbour at (r+dr, c+dc); ``fill`` outside the grid."""
    h, w = a.shape
    out = np.full_like(a, fill)
    rs = slice(max(0, -dr), min(h, h - dr))
    cs = slice(max(0, -dc), min(w, w - dc))
    rd = slice(max(0, dr), min(h, h + dr))
    cd = slice(max(0, dc), min(w, w + dc))
    out[rs, cs] = a[rd, cd]
    return out


def label_patches(class_grid: Grid, connectivity: int = 8) -> PatchLabeling:
    """Connected components per class, numbered by their first cell in row-major order."""
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    codes, valid = _class_codes(class_grid)
    structure = ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)
    raw = np.zeros(codes.shape, dtype=np.int64)
    offset = 0
    for cls in np.unique(codes[valid]):
        lab, n = ndimage.label(valid & (codes == cls), structure=structure)
        raw[lab > 0] = lab[lab > 0] + offset
        offset += n
    # renumber by first occurrence
    flat = raw.ravel()
    uniq, first = np.unique(flat, return_index=True)
    keep = uniq > 0
    order = np.argsort(first[keep], kind="stable")
    remap = np.zeros(offset + 1, dtype=np.int64)
    remap[uniq[keep][order]] = np.arange(1, order.size + 1)
    ids = remap[raw]

    cs = class_grid.cell_size
    n = order.size
    cls_of = np.zeros(n + 1, dtype=np.int64)
    cls_of[ids[valid]] = codes[valid]
    cells = np.bincount(ids.ravel(), minlength=n + 1)

    klass = np.where(valid, codes, _NODATA_CLASS)
    edges = np.zeros(codes.shape, dtype=np.int64)
    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        edges += (_shift(klass, dr, dc, _NODATA_CLASS) != klass) & valid
    n_edges = np.bincount(ids.ravel(), weights=edges.ravel(), minlength=n + 1)

    contig_sum = np.zeros(codes.shape, dtype=np.float64)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            same = (_shift(ids, dr, dc, 0) == ids) & valid
            contig_sum += CONTIG_TEMPLATE[dr + 1, dc + 1] * same
    contig_tot = np.bincount(ids.ravel(), weights=contig_sum.ravel(), minlength=n + 1)
    v = CONTIG_TEMPLATE.sum()

    patches = []
    for pid in range(1, n + 1):
        a = int(cells[pid])
        patches.append(PatchRecord(
            patch_id=pid,
            cls=int(cls_of[pid]),
            n_cells=a,
            n_edges=int(n_edges[pid]),
            area=a * cs * cs,
            perimeter=float(n_edges[pid]) * cs,
            contiguity=(contig_tot[pid] / a - 1.0) / (v - 1.0),
        ))
    return PatchLabeling(class_grid, ids, connectivity, patches)


@dataclass
class LandscapeMetrics:
    """Class-level values keyed by class code, plus landscape-level values. NaN marks undefined."""

    by_class: dict[int, dict[str, float]]
    landscape: dict[str, float]

    def rows(self) -> list[tuple[str, int | None, float]]:
        out = [(name, None, val) for name, val in self.landscape.items()]
        for cls in sorted(self.by_class):
            out.extend((name, cls, val) for name, val in self.by_class[cls].items())
        return out


def _pafrac(perims: np.ndarray, areas: np.ndarray) -> float:
    # least-squares slope of ln(perimeter) on ln(area)
    n = perims.size
    if n < 2:
        return math.nan
    lp, la = np.log(perims), np.log(areas)
    den = n * np.sum(la * la) - np.sum(la) ** 2
    if not abs(den) > 1e-12 * max(1.0, n * np.sum(la * la)):
        return math.nan
    return float((n * np.sum(lp * la) - np.sum(lp) * np.sum(la)) / den)


def _adjacency_counts(lab: PatchLabeling, classes: np.ndarray) -> np.ndarray:
    """4-neighbour like and unlike adjacencies, each pair counted from both sides."""
    codes, valid = _class_codes(lab.class_grid)
    index = {int(c): i for i, c in enumerate(classes)}
    g = np.zeros((classes.size, classes.size))
    idx = np.full(codes.shape, -1, dtype=np.int64)
    for c, i in index.items():
        idx[valid & (codes == c)] = i
    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        nb = _shift(idx, dr, dc, -1)
        ok = (idx >= 0) & (nb >= 0)
        np.add.at(g, (idx[ok], nb[ok]), 1.0)
    return g


def compute_metrics(lab: PatchLabeling, requested: Iterable[str] | None = None) -> LandscapeMetrics:
    """Evaluate the requested indices (all by default) on a labelled class grid.

    Areas are in m2 and perimeters in m, except COHESION which works in cell
    units. PD is patches per 100 ha. PAFRAC is the slope of ln(perimeter)
    regressed on ln(area) over the class's patches.
    """
    want = set(CLASS_METRICS) | set(LANDSCAPE_METRICS) if requested is None else set(requested)
    unknown = want - set(CLASS_METRICS) - set(LANDSCAPE_METRICS)
    if unknown:
        raise ValueError(f"unknown metric(s): {sorted(unknown)}")
    A = lab.total_area
    if A == 0:
        raise ValueError("class grid has no valid cells")
    Z = lab.n_cells
    cs = lab.class_grid.cell_size
    classes = lab.classes
    m = classes.size
    p = np.array([sum(q.area for q in lab.class_patches(int(c))) for c in classes]) / A

    by_class = {}
    for cls in classes:
        ps = lab.class_patches(int(cls))
        area = np.array([p.area for p in ps])
        perim = np.array([p.perimeter for p in ps])
        cells = np.array([p.n_cells for p in ps], dtype=float)
        edges = np.array([p.n_edges for p in ps], dtype=float)
        vals = {}
        if "PLAND" in want:
            vals["PLAND"] = 100.0 * area.sum() / A
        if "PD" in want:
            vals["PD"] = len(ps) / A * 1e6
        if "LSI" in want:
            vals["LSI"] = 0.25 * perim.sum() / math.sqrt(A)
        if "COHESION" in want:
            num = np.sum(edges * np.sqrt(cells))
            if Z > 1 and num > 0:
                vals["COHESION"] = (1.0 - edges.sum() / num) / (1.0 - 1.0 / math.sqrt(Z)) * 100.0
            else:
                vals["COHESION"] = math.nan
        if "PAFRAC" in want:
            vals["PAFRAC"] = _pafrac(perim, area)
        if "CONTIG_AM" in want:
            vals["CONTIG_AM"] = float(np.sum(np.array([p.contiguity for p in ps]) * area) / area.sum())
        by_class[int(cls)] = {k: float(v) for k, v in vals.items()}

    land = {}
    if "PD" in want:
        land["PD"] = len(lab.patches) / A * 1e6
    if "LSI" in want:
        # unlike-class sides are seen from both cells, boundary sides from one
        codes, valid = _class_codes(lab.class_grid)
        klass = np.where(valid, codes, _NODATA_CLASS)
        outer = inner = 0
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            nb = _shift(klass, dr, dc, _NODATA_CLASS)
            diff = (nb != klass) & valid
            outer += int(np.sum(diff & (nb == _NODATA_CLASS)))
            inner += int(np.sum(diff & (nb != _NODATA_CLASS)))
        land["LSI"] = 0.25 * (outer + inner / 2) * cs / math.sqrt(A)
    if "CONTAG" in want:
        if m == 1:
            land["CONTAG"] = 100.0
        else:
            g = _adjacency_counts(lab, classes)
            acc = 0.0
            for i in range(m):
                row = g[i].sum()
                if row == 0:
                    continue
                for k in range(m):
                    q = p[i] * g[i, k] / row
                    if q > 0:
                        acc += q * math.log(q)
            land["CONTAG"] = (1.0 + acc / (2.0 * math.log(m))) * 100.0
    if "SHDI" in want or "SHEI" in want:
        shdi = abs(float(np.sum(p[p > 0] * np.log(p[p > 0]))))
        if "SHDI" in want:
            land["SHDI"] = shdi
        if "SHEI" in want:
            land["SHEI"] = shdi / math.log(m) if m >= 2 else math.nan
    return LandscapeMetrics(by_class, {k: float(v) for k, v in land.items()})


def zone_landscape_metrics(
    class_grid: Grid,
    zone_raster: Grid,
    requested: Iterable[str] | None = None,
    connectivity: int = 8,
) -> dict[int, LandscapeMetrics]:
    """Metrics for each zone, computed on the class grid clipped to that zone."""
    require_aligned(class_grid, zone_raster)
    zones = zone_raster.values
    out = {}
    for zid in np.unique(zones[zone_raster.mask]).astype(np.int64):
        sel = (zones == zid) & zone_raster.mask & class_grid.mask
        if not sel.any():
            continue
        rows, cols = np.nonzero(sel)
        r0, r1, c0, c1 = rows.min(), rows.max() + 1, cols.min(), cols.max() + 1
        nodata = class_grid.nodata
        sub = np.where(sel, class_grid.values, nodata)[r0:r1, c0:c1]
        ox = class_grid.origin_x + c0 * class_grid.cell_size
        oy = class_grid.origin_y + (class_grid.height - r1) * class_grid.cell_size
        clip = Grid(sub, ox, oy, class_grid.cell_size, nodata)
        out[int(zid)] = compute_metrics(label_patches(clip, connectivity), requested)
    return out


def write_zone_metrics(metrics: dict[int, LandscapeMetrics], path) -> None:
    """Long-format CSV ``zone_id,metric,class,value``; class is empty at landscape level."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["zone_id", "metric", "class", "value"])
        for zid in sorted(metrics):
            for name, cls, val in metrics[zid].rows():
                w.writerow([zid, name, "" if cls is None else cls, "" if not math.isfinite(val) else repr(float(val))])
