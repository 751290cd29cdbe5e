"""Seeded synthetic city used as a stand-in for real inputs in end-to-end runs.

Layout
------
The grid is tiled by square zones of ``ZONE_CELLS`` cells. Most zones hold a
building block surrounded by streets; some are open plazas and some are
parks. A strip of water runs along the southern edge. The western half is
the tall, sparsely planted regime and the eastern half the low, leafy one.

Land-cover codes are listed in :data:`LANDCOVER_CODES`. The LST layer is

    LST = 30 + w[regime, class] + N(0, 0.5)

with the per-regime class weights in :data:`LST_WEIGHTS`.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from .indices import BAND_NAMES
from .microclimate import MeteoSample, Site, solar_position
from .raster import Grid, ZoneSet, write_grid, write_zones
from .table import FeatureTable

IMPERVIOUS, BUILDING, TREE, GRASS, WATER = 1, 2, 3, 4, 5
LANDCOVER_CODES = {"impervious": IMPERVIOUS, "building": BUILDING, "tree": TREE, "grass": GRASS, "water": WATER}

ZONE_CELLS = 16
CELL_SIZE = 2.0
WATER_ROWS = 5

# mean surface reflectance per class, in BAND_NAMES order
REFLECTANCE = {
    IMPERVIOUS: (0.12, 0.13, 0.14, 0.20, 0.25, 0.22),
    BUILDING: (0.18, 0.19, 0.20, 0.25, 0.30, 0.27),
    TREE: (0.03, 0.06, 0.04, 0.40, 0.20, 0.10),
    GRASS: (0.04, 0.08, 0.06, 0.35, 0.25, 0.15),
    WATER: (0.06, 0.05, 0.03, 0.02, 0.01, 0.005),
}

# LST offsets above 30 degC by regime (0 west, 1 east) and class
LST_WEIGHTS = {
    0: {IMPERVIOUS: 6.0, BUILDING: 8.0, TREE: -2.0, GRASS: 1.0, WATER: -4.0},
    1: {IMPERVIOUS: 6.0, BUILDING: 3.0, TREE: -6.0, GRASS: -1.0, WATER: -4.0},
}

SOCIO_COLUMNS = ("PopD", "RD", "IntD", "RNC")


@dataclass
class CityBundle:
    """Every input the pipeline reads, plus ground truth for checks."""

    dsm: Grid
    cdsm: Grid
    landcover: Grid
    bands: dict[str, Grid]
    lst: Grid
    zones: ZoneSet
    meteo: list[MeteoSample]
    socio: FeatureTable
    regime: dict[int, int]  # zone_id -> 0 west, 1 east
    canyon_cells: np.ndarray  # (row, col) street cells between two building blocks
    plaza_cells: np.ndarray  # (row, col) centres of open plazas
    seed: int

    def write(self, directory, **overrides) -> Path:
        """Write the input files and a ``run.toml`` next to them; return the config path.

        ``overrides`` maps TOML section names to dicts merged over the
        defaults (use the key ``""`` for top-level keys).
        """
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_grid(self.dsm, d / "dsm.asc")
        write_grid(self.cdsm, d / "cdsm.asc")
        write_grid(self.landcover, d / "landcover.asc")
        write_grid(self.lst, d / "lst.asc")
        bands = {}
        for name, g in self.bands.items():
            write_grid(g, d / f"band_{name}.asc")
            bands[name] = f"band_{name}.asc"
        (d / "bands.json").write_text(json.dumps(bands, indent=2))
        write_zones(self.zones, d / "zones.geojson")
        write_meteo(self.meteo, d / "meteo.csv")
        self.socio.to_csv(d / "socio.csv")
        cfg = d / "run.toml"
        cfg.write_text(default_config_text(self, overrides))
        return cfg


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)


def default_config_text(bundle: CityBundle, overrides: dict | None = None) -> str:
    n_zones = len(bundle.zones)
    candidates = [k for k in (30, 50, 70, 94, 120) if k < n_zones] or [max(10, n_zones // 2)]
    sections = {
        "": {"seed": bundle.seed, "output_dir": "out"},
        "inputs": {
            "dsm": "dsm.asc", "cdsm": "cdsm.asc", "landcover": "landcover.asc", "bands": "bands.json",
            "lst": "lst.asc", "zones": "zones.geojson", "meteo": "meteo.csv", "socio": "socio.csv",
        },
        "utci": {"hour": 11, "month": 3},
        "landcover": {"building_class": BUILDING, "water_classes": [WATER]},
        "spatial": {"permutations": 199},
        "model": {"outer_folds": 5, "inner_folds": 3, "kernel_candidates": candidates},
        "model.fit": {"n_estimators": 150, "learning_rate": 0.1, "max_depth": 2, "subsample": 0.8},
        "model.grid": {"max_depth": [2, 3]},
        "explain": {"features": ["SVF", "NDVI", "BH", "CD"], "signed_feature": "SVF"},
    }
    for sec, vals in (overrides or {}).items():
        sections.setdefault(sec, {}).update(vals)
    lines = [f"{k} = {_toml_value(v)}" for k, v in sections.pop("").items()]
    for sec, vals in sections.items():
        lines.append("")
        lines.append(f"[{sec}]")
        lines.extend(f"{k} = {_toml_value(v)}" for k, v in vals.items())
    return "\n".join(lines) + "\n"


def write_meteo(samples, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "ta", "rh", "wind10", "ghi", "dni", "dhi"])
        for s in samples:
            w.writerow([s.timestamp.isoformat(), repr(s.ta), repr(s.rh), repr(s.wind10),
                        repr(s.ghi), repr(s.dni), repr(s.dhi)])


def synthetic_meteo(rng: np.random.Generator, site: Site = Site(), year: int = 2020, month: int = 3) -> list[MeteoSample]:
    """Hourly forcing for one month: diurnal temperature, humidity and clear-sky radiation with daily cloudiness."""
    start = datetime(year, month, 1, tzinfo=timezone.utc) - timedelta(hours=site.utc_offset)
    out = []
    t = start
    day_clear = None
    while (t + timedelta(hours=site.utc_offset)).month == month:
        local = t + timedelta(hours=site.utc_offset)
        if local.hour == 0 or day_clear is None:
            day_clear = rng.uniform(0.55, 1.0)
            day_warm = rng.normal(0.0, 0.8)
        h = local.hour
        ta = 27.0 + day_warm + 4.0 * np.sin(2 * np.pi * (h - 8) / 24)
        rh = float(np.clip(80.0 - 3.0 * (ta - 27.0) + rng.normal(0, 2), 40, 98))
        wind = float(rng.uniform(1.0, 3.5))
        _, alt = solar_position(site.lat, site.lon, t)
        if alt > 0:
            s = np.sin(np.radians(alt))
            dni = 900.0 * day_clear * s ** 0.3
            dhi = 60.0 + 120.0 * (1 - day_clear) * s
            ghi = dni * s + dhi
        else:
            dni = dhi = ghi = 0.0
        out.append(MeteoSample(t, float(round(ta, 3)), round(rh, 3), round(wind, 3),
                               float(round(ghi, 3)), float(round(dni, 3)), float(round(dhi, 3))))
        t += timedelta(hours=1)
    return out


def make_synthetic_city(seed: int = 0, size: int = 192) -> CityBundle:
    """Generate a seeded city of ``size`` x ``size`` cells at 2 m."""
    if size < 64:
        raise ValueError(f"size must be >= 64 cells per side, got {size}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0x51717])))
    n = size
    nz = n // ZONE_CELLS
    z = ZONE_CELLS
    height = np.zeros((n, n))
    cover = np.full((n, n), IMPERVIOUS, dtype=np.int64)
    canopy = np.zeros((n, n))
    regime_cell = (np.arange(n)[None, :] >= n // 2).astype(int).repeat(n, axis=0)

    kind = np.empty((nz, nz), dtype=object)
    for i in range(nz):
        for j in range(nz):
            r = (i + 2 * j) % 7
            kind[i, j] = "plaza" if r == 3 else "park" if r == 5 else "block"

    for i in range(nz):
        for j in range(nz):
            r0, c0 = i * z, j * z
            east = c0 + z // 2 >= n // 2
            if kind[i, j] == "block":
                a, b = rng.integers(2, 5, 2)
                e, f = rng.integers(2, 5, 2)
                lo, hi = (6.0, 18.0) if east else (25.0, 60.0)
                split = rng.random() < 0.5
                if split:
                    mid = c0 + z // 2
                    height[r0 + a:r0 + z - b, c0 + e:mid] = rng.uniform(lo, hi)
                    height[r0 + a:r0 + z - b, mid:c0 + z - f] = rng.uniform(lo, hi)
                else:
                    height[r0 + a:r0 + z - b, c0 + e:c0 + z - f] = rng.uniform(lo, hi)
            elif kind[i, j] == "park":
                cover[r0 + 1:r0 + z - 1, c0 + 1:c0 + z - 1] = GRASS

    # canopy blobs on open ground, denser in the east
    rows, cols = np.mgrid[0:n, 0:n]
    for i in range(nz):
        for j in range(nz):
            east = j * z + z // 2 >= n // 2
            plaza = kind[i, j] == "plaza"
            lam = 0.3 if plaza else (2.5 if east else 0.6) + (1.5 if kind[i, j] == "park" else 0.0)
            for _ in range(rng.poisson(lam)):
                cr = i * z + rng.uniform(0, z)
                cc = j * z + rng.uniform(0, z)
                rad = rng.uniform(1.5, 3.5)
                h = rng.uniform(8.0, 15.0)
                blob = (rows - cr) ** 2 + (cols - cc) ** 2 <= rad ** 2
                canopy[blob] = np.maximum(canopy[blob], h)
    building = height > 0
    water = np.zeros((n, n), dtype=bool)
    water[n - WATER_ROWS:] = True
    height[water] = 0.0
    building &= ~water
    canopy[building | water] = 0.0
    cover[canopy > 0] = TREE
    cover[building] = BUILDING
    cover[water] = WATER

    dsm = Grid(height, 0.0, 0.0, CELL_SIZE)
    cdsm = dsm.with_values(canopy)
    landcover = dsm.with_values(cover.astype(np.float64))

    bands = {}
    refl = np.array([REFLECTANCE[c] for c in sorted(REFLECTANCE)])  # (class, band)
    idx = cover - 1
    for b, name in enumerate(BAND_NAMES):
        v = refl[idx, b] + rng.normal(0.0, 0.01, (n, n))
        bands[name] = dsm.with_values(np.clip(v, 0.001, 1.0))

    w = np.zeros((n, n))
    for reg, table in LST_WEIGHTS.items():
        for cls, val in table.items():
            w[(regime_cell == reg) & (cover == cls)] = val
    lst = dsm.with_values(30.0 + w + rng.normal(0.0, 0.5, (n, n)))

    polys = []
    regime = {}
    y_top = n * CELL_SIZE
    for i in range(nz):
        for j in range(nz):
            zid = i * nz + j + 1
            x0, x1 = j * z * CELL_SIZE, (j + 1) * z * CELL_SIZE
            y1, y0 = y_top - i * z * CELL_SIZE, y_top - (i + 1) * z * CELL_SIZE
            polys.append((zid, [[[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]]]))
            regime[zid] = int(j * z + z // 2 >= n // 2)
    zones = ZoneSet.from_polygons(polys)

    ids = np.array([p[0] for p in polys])
    bd = np.array([building[(i * z):(i + 1) * z, (j * z):(j + 1) * z].mean() for i in range(nz) for j in range(nz)])
    socio = FeatureTable(ids, {
        "PopD": np.round(2000 + 15000 * bd + rng.normal(0, 800, ids.size), 3),
        "RD": np.round(rng.uniform(5, 20, ids.size), 3),
        "IntD": np.round(rng.uniform(20, 120, ids.size), 3),
        "RNC": np.round(rng.uniform(0.3, 0.9, ids.size), 3),
    })

    canyon, plaza = [], []
    for i in range(nz):
        for j in range(nz - 1):
            if kind[i, j] == "block" and kind[i, j + 1] == "block" and i * z + z // 2 < n - WATER_ROWS:
                r, c = i * z + z // 2, (j + 1) * z
                if not building[r, c] and not building[r, c - 1] and canopy[r, c] == 0:
                    canyon.append((r, c))
            if kind[i, j] == "plaza":
                r, c = i * z + z // 2, j * z + z // 2
                if r < n - WATER_ROWS and canopy[r, c] == 0:
                    plaza.append((r, c))
    return CityBundle(dsm, cdsm, landcover, bands, lst, zones, synthetic_meteo(rng), socio, regime,
                      np.array(canyon, dtype=np.int64).reshape(-1, 2), np.array(plaza, dtype=np.int64).reshape(-1, 2),
                      int(seed))
