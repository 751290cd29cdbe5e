"""Georeferenced grids, zone polygons and the raster plumbing shared by every stage.

Conventions
-----------
* ``values[0]`` is the northernmost row (ESRI ASCII order).
* ``origin_x, origin_y`` is the lower-left corner of the lower-left cell.
* All sampling happens at cell centres.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

DEFAULT_NODATA = -9999.0

_ASC_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


class RasterFormatError(ValueError):
    """Raised when a grid file cannot be parsed or is structurally inconsistent."""


@dataclass(frozen=True)
class Grid:
    """Immutable georeferenced 2D scalar field.

    Nodata cells hold ``nodata`` in ``values``; use :attr:`mask` or
    :meth:`masked` instead of comparing by hand.
    """

    values: np.ndarray
    origin_x: float = 0.0
    origin_y: float = 0.0
    cell_size: float = 1.0
    nodata: float = DEFAULT_NODATA

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64, copy=True)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"grid values must be a non-empty 2D array, got shape {arr.shape}")
        if not self.cell_size > 0:
            raise ValueError(f"cell_size must be > 0, got {self.cell_size}")
        valid = arr != self.nodata
        if not np.all(np.isfinite(arr[valid])):
            raise ValueError("grid contains non-finite values outside nodata")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def mask(self) -> np.ndarray:
        """Boolean array, True where the cell holds data."""
        return self.values != self.nodata

    def masked(self) -> np.ndarray:
        """Float copy of the values with nodata replaced by NaN."""
        out = self.values.copy()
        out[~self.mask] = np.nan
        return out

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(x, y)`` arrays of cell-centre coordinates, shape ``(height, width)``."""
        cols = np.arange(self.width)
        rows = np.arange(self.height)
        x = self.origin_x + (cols + 0.5) * self.cell_size
        y = self.origin_y + (self.height - rows - 0.5) * self.cell_size
        return np.meshgrid(x, y)

    def with_values(self, values, nodata: float | None = None) -> "Grid":
        """New grid sharing this georeference."""
        return Grid(
            values,
            self.origin_x,
            self.origin_y,
            self.cell_size,
            self.nodata if nodata is None else nodata,
        )

    @classmethod
    def from_masked(cls, arr, like: "Grid", nodata: float | None = None) -> "Grid":
        """Build a grid from an array using NaN for missing cells."""
        nd = like.nodata if nodata is None else nodata
        out = np.where(np.isfinite(arr), arr, nd)
        return cls(out, like.origin_x, like.origin_y, like.cell_size, nd)

    def aligned_with(self, other: "Grid") -> bool:
        return (
            self.shape == other.shape
            and math.isclose(self.cell_size, other.cell_size)
            and math.isclose(self.origin_x, other.origin_x, abs_tol=1e-9)
            and math.isclose(self.origin_y, other.origin_y, abs_tol=1e-9)
        )

    def __eq__(self, other):
        if not isinstance(other, Grid):
            return NotImplemented
        return (
            self.aligned_with(other)
            and self.nodata == other.nodata
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


def require_aligned(*grids: Grid | None) -> None:
    present = [g for g in grids if g is not None]
    for g in present[1:]:
        if not present[0].aligned_with(g):
            raise ValueError(
                f"grids are not aligned: shape {present[0].shape} vs {g.shape}, "
                f"origin ({present[0].origin_x}, {present[0].origin_y}) vs ({g.origin_x}, {g.origin_y})"
            )


# --------------------------------------------------------------------------- I/O


def read_grid(path, format: str | None = None) -> Grid:
    """Read an ESRI ASCII grid (``.asc``) or a raw float32 body with JSON sidecar (``.f32``).

    The format is inferred from the suffix when not given.
    """
    path = Path(path)
    fmt = _infer_format(path, format)
    if fmt == "esri_ascii":
        return _read_asc(path)
    return _read_f32(path)


def write_grid(grid: Grid, path, format: str | None = None) -> None:
    """Write ``grid`` so that :func:`read_grid` restores it.

    ESRI ASCII uses 17 significant digits, so float64 values survive the
    roundtrip; raw_f32 is exact for values representable in float32.
    """
    path = Path(path)
    fmt = _infer_format(path, format)
    if fmt == "esri_ascii":
        _write_asc(grid, path)
    else:
        _write_f32(grid, path)


def _infer_format(path: Path, format: str | None) -> str:
    if format is not None:
        if format not in ("esri_ascii", "raw_f32"):
            raise ValueError(f"unknown grid format {format!r}")
        return format
    suffix = path.suffix.lower()
    if suffix in (".asc", ".txt"):
        return "esri_ascii"
    if suffix in (".f32", ".json"):
        return "raw_f32"
    raise ValueError(f"cannot infer grid format from {path.name!r}")


def _read_asc(path: Path) -> Grid:
    header = {}
    with open(path) as fh:
        lines = fh.read().splitlines()
    lineno = 0
    while lineno < len(lines) and len(header) < 6:
        line = lines[lineno].strip()
        if not line:
            lineno += 1
            continue
        tokens = line.split()
        key = tokens[0].lower()
        if key not in _ASC_KEYS and key not in ("xllcenter", "yllcenter"):
            break
        if len(tokens) != 2:
            raise RasterFormatError(f"{path}:{lineno + 1}: malformed header line {line!r}")
        try:
            header[key] = float(tokens[1])
        except ValueError:
            raise RasterFormatError(f"{path}:{lineno + 1}: malformed header line {line!r}") from None
        lineno += 1

    for key in ("ncols", "nrows", "cellsize"):
        if key not in header:
            raise RasterFormatError(f"{path}: header is missing {key!r}")
    ncols, nrows, cs = int(header["ncols"]), int(header["nrows"]), header["cellsize"]
    if "xllcorner" in header:
        x0 = header["xllcorner"]
    elif "xllcenter" in header:
        x0 = header["xllcenter"] - cs / 2
    else:
        raise RasterFormatError(f"{path}: header is missing 'xllcorner'")
    if "yllcorner" in header:
        y0 = header["yllcorner"]
    elif "yllcenter" in header:
        y0 = header["yllcenter"] - cs / 2
    else:
        raise RasterFormatError(f"{path}: header is missing 'yllcorner'")
    nodata = header.get("nodata_value", DEFAULT_NODATA)

    body = " ".join(lines[lineno:]).split()
    if len(body) != ncols * nrows:
        raise RasterFormatError(
            f"{path}: body has {len(body)} values, header declares {nrows}x{ncols}={nrows * ncols}"
        )
    values = np.array([float(t) for t in body], dtype=np.float64).reshape(nrows, ncols)
    return Grid(values, x0, y0, cs, nodata)


def _fmt(v: float) -> str:
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def _write_asc(grid: Grid, path: Path) -> None:
    lines = [
        f"ncols {grid.width}",
        f"nrows {grid.height}",
        f"xllcorner {_fmt(grid.origin_x)}",
        f"yllcorner {_fmt(grid.origin_y)}",
        f"cellsize {_fmt(grid.cell_size)}",
        f"NODATA_value {_fmt(grid.nodata)}",
    ]
    for row in grid.values:
        lines.append(" ".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def _sidecar(path: Path) -> tuple[Path, Path]:
    base = path.with_suffix("")
    return base.with_suffix(".f32"), base.with_suffix(".json")


def _read_f32(path: Path) -> Grid:
    body_path, meta_path = _sidecar(path)
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise RasterFormatError(f"{meta_path}: invalid JSON header ({exc})") from None
    for key in ("width", "height", "origin_x", "origin_y", "cell_size", "nodata"):
        if key not in meta:
            raise RasterFormatError(f"{meta_path}: header is missing {key!r}")
    raw = np.fromfile(body_path, dtype="<f4")
    w, h = int(meta["width"]), int(meta["height"])
    if raw.size != w * h:
        raise RasterFormatError(f"{body_path}: body has {raw.size} values, header declares {h}x{w}")
    nodata = float(np.float32(meta["nodata"]))
    return Grid(raw.reshape(h, w).astype(np.float64), meta["origin_x"], meta["origin_y"], meta["cell_size"], nodata)


def _write_f32(grid: Grid, path: Path) -> None:
    body_path, meta_path = _sidecar(path)
    meta = {
        "width": grid.width,
        "height": grid.height,
        "origin_x": grid.origin_x,
        "origin_y": grid.origin_y,
        "cell_size": grid.cell_size,
        "nodata": grid.nodata,
        "dtype": "float32",
        "byteorder": "little",
    }
    grid.values.astype("<f4").tofile(body_path)
    meta_path.write_text(json.dumps(meta, indent=2))


# --------------------------------------------------------------------------- zones


@dataclass(frozen=True)
class Zone:
    zone_id: int
    outer: np.ndarray
    holes: tuple[np.ndarray, ...] = ()

    @property
    def rings(self) -> tuple[np.ndarray, ...]:
        return (self.outer, *self.holes)

    def area(self) -> float:
        return abs(_signed_area(self.outer)) - sum(abs(_signed_area(h)) for h in self.holes)

    def centroid(self) -> tuple[float, float]:
        ax = ay = total = 0.0
        for sign, ring in [(1.0, self.outer)] + [(-1.0, h) for h in self.holes]:
            a = _signed_area(ring)
            cx, cy = _ring_centroid(ring, a)
            ax += sign * abs(a) * cx
            ay += sign * abs(a) * cy
            total += sign * abs(a)
        return ax / total, ay / total


def _signed_area(ring: np.ndarray) -> float:
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.sum(x[:-1] * y[1:] - x[1:] * y[:-1]))


def _ring_centroid(ring: np.ndarray, a: float) -> tuple[float, float]:
    x, y = ring[:, 0], ring[:, 1]
    cross = x[:-1] * y[1:] - x[1:] * y[:-1]
    cx = float(np.sum((x[:-1] + x[1:]) * cross)) / (6 * a)
    cy = float(np.sum((y[:-1] + y[1:]) * cross)) / (6 * a)
    return cx, cy


def _validate_ring(ring, zone_id: int) -> np.ndarray:
    arr = np.asarray(ring, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"zone {zone_id}: ring must be a sequence of (x, y) vertices")
    if arr.shape[0] < 4:
        raise ValueError(f"zone {zone_id}: degenerate ring with {arr.shape[0]} vertices (need >= 4)")
    if not np.array_equal(arr[0], arr[-1]):
        raise ValueError(f"zone {zone_id}: ring is not closed (first vertex != last vertex)")
    return arr


@dataclass(frozen=True)
class ZoneSet:
    """Planning-unit polygons in the grid CRS."""

    zones: tuple[Zone, ...] = field(default_factory=tuple)

    def __post_init__(self):
        ids = [z.zone_id for z in self.zones]
        if len(set(ids)) != len(ids):
            raise ValueError("zone ids must be unique")

    @classmethod
    def from_polygons(cls, polygons: Iterable[tuple[int, Sequence]]) -> "ZoneSet":
        """Build from ``(zone_id, rings)`` where ``rings[0]`` is the outer ring."""
        zones = []
        for zid, rings in polygons:
            zid = int(zid)
            checked = [_validate_ring(r, zid) for r in rings]
            zones.append(Zone(zid, checked[0], tuple(checked[1:])))
        return cls(tuple(zones))

    @property
    def ids(self) -> list[int]:
        return [z.zone_id for z in self.zones]

    def __len__(self):
        return len(self.zones)

    def __iter__(self):
        return iter(self.zones)

    def centroids(self) -> np.ndarray:
        return np.array([z.centroid() for z in self.zones], dtype=np.float64).reshape(-1, 2)


def read_zones(path) -> ZoneSet:
    """Read a GeoJSON FeatureCollection of Polygons with integer ``zone_id`` properties."""
    data = json.loads(Path(path).read_text())
    if data.get("type") != "FeatureCollection":
        raise ValueError(f"{path}: expected a GeoJSON FeatureCollection")
    polys = []
    for i, feat in enumerate(data.get("features", [])):
        props = feat.get("properties") or {}
        if "zone_id" not in props:
            raise ValueError(f"{path}: feature {i} has no 'zone_id' property")
        geom = feat.get("geometry") or {}
        if geom.get("type") != "Polygon":
            raise ValueError(f"{path}: feature {i} geometry must be a Polygon, got {geom.get('type')!r}")
        polys.append((int(props["zone_id"]), geom["coordinates"]))
    return ZoneSet.from_polygons(polys)


def write_zones(zones: ZoneSet, path) -> None:
    features = [
        {
            "type": "Feature",
            "properties": {"zone_id": z.zone_id},
            "geometry": {"type": "Polygon", "coordinates": [r.tolist() for r in z.rings]},
        }
        for z in zones
    ]
    Path(path).write_text(json.dumps({"type": "FeatureCollection", "features": features}))


def points_in_ring(px: np.ndarray, py: np.ndarray, ring: np.ndarray) -> np.ndarray:
    """Even-odd crossing test, half-open on top/right edges.

    A point on a bottom or left edge is inside, on a top or right edge outside,
    so points on an edge shared by two adjacent polygons belong to exactly one.
    """
    inside = np.zeros(px.shape, dtype=bool)
    x1, y1 = ring[:-1, 0], ring[:-1, 1]
    x2, y2 = ring[1:, 0], ring[1:, 1]
    for ax, ay, bx, by in zip(x1, y1, x2, y2):
        crosses = (ay > py) != (by > py)
        if not crosses.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = ax + (py - ay) * (bx - ax) / (by - ay)
        inside ^= crosses & (px < xint)
    return inside


def zone_contains(zone: Zone, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    inside = points_in_ring(px, py, zone.outer)
    for hole in zone.holes:
        inside &= ~points_in_ring(px, py, hole)
    return inside


ZONE_NODATA = -1.0


def rasterize_zones(zones: ZoneSet, template: Grid) -> Grid:
    """Burn zone ids into a grid shaped like ``template`` (cell-centre sampling).

    Cells inside several zones take the lowest zone id; cells outside every
    zone are nodata (-1).
    """
    out = np.full(template.shape, ZONE_NODATA)
    x, y = template.cell_centers()
    for zone in sorted(zones, key=lambda z: z.zone_id, reverse=True):
        xs = np.concatenate([r[:, 0] for r in zone.rings])
        ys = np.concatenate([r[:, 1] for r in zone.rings])
        box = (x >= xs.min()) & (x <= xs.max()) & (y >= ys.min()) & (y <= ys.max())
        if not box.any():
            continue
        hit = np.zeros(template.shape, dtype=bool)
        hit[box] = zone_contains(zone, x[box], y[box])
        out[hit] = zone.zone_id
    return template.with_values(out, nodata=ZONE_NODATA)


# --------------------------------------------------------------------------- operators


def distance_to_mask(mask: Grid) -> Grid:
    """Euclidean distance in metres from every cell centre to the nearest 1-cell centre."""
    target = (mask.values == 1) & mask.mask
    if not target.any():
        raise ValueError("no target cells in mask")
    dist = ndimage.distance_transform_edt(~target, sampling=mask.cell_size)
    return mask.with_values(dist)


def sample_bilinear(src: Grid, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of ``src`` at world coordinates; NaN where support is nodata.

    Coordinates beyond the outer cell centres are clamped to the edge.
    """
    col = (np.asarray(x, dtype=np.float64) - src.origin_x) / src.cell_size - 0.5
    row = (src.origin_y + src.height * src.cell_size - np.asarray(y, dtype=np.float64)) / src.cell_size - 0.5
    col = np.clip(col, 0.0, src.width - 1)
    row = np.clip(row, 0.0, src.height - 1)
    c0 = np.minimum(np.floor(col).astype(np.int64), max(src.width - 2, 0))
    r0 = np.minimum(np.floor(row).astype(np.int64), max(src.height - 2, 0))
    c1 = np.minimum(c0 + 1, src.width - 1)
    r1 = np.minimum(r0 + 1, src.height - 1)
    fc = col - c0
    fr = row - r0
    v = src.masked()
    out = (
        v[r0, c0] * (1 - fr) * (1 - fc)
        + v[r0, c1] * (1 - fr) * fc
        + v[r1, c0] * fr * (1 - fc)
        + v[r1, c1] * fr * fc
    )
    # exact node hits must not pick up NaN from zero-weight neighbours
    exact = (fc == 0) & (fr == 0)
    out = np.where(exact, v[r0, c0], out)
    return out


def resample_bilinear(src: Grid, template: Grid) -> Grid:
    """Interpolate ``src`` at the cell centres of ``template``."""
    x, y = template.cell_centers()
    out = sample_bilinear(src, x, y)
    return Grid.from_masked(out, template, nodata=src.nodata)
