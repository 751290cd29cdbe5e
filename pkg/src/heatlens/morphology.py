"""Sky view factor from surface models and per-zone 3D morphometrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._raycast import horizon_svf
from .raster import Grid, require_aligned
from .table import FeatureTable

OBSERVER_HEIGHT = 1.1


@dataclass(frozen=True)
class SvfConfig:
    """Ray-casting settings; defaults follow the SOLWEIG-style city runs."""

    directions: int = 360
    search_radius: float = 150.0
    canopy_transmissivity: float = 0.03
    observer_height: float = OBSERVER_HEIGHT

    def __post_init__(self):
        if self.directions < 8:
            raise ValueError(f"directions must be >= 8, got {self.directions}")
        if not self.search_radius > 0:
            raise ValueError(f"search_radius must be > 0, got {self.search_radius}")
        if not 0.0 <= self.canopy_transmissivity <= 1.0:
            raise ValueError(f"canopy_transmissivity must lie in [0, 1], got {self.canopy_transmissivity}")


def annulus_weights(n_annuli: int = 90) -> np.ndarray:
    """Cosine-weighted sky share of each zenith-angle ring of a horizontal surface.

    Ring ``a`` (1-based) spans zenith angles ``[(a-1), a] * 90/n`` degrees and
    gets ``sin(pi/(2n)) * sin(pi*(2a-1)/(2n))``; the weights sum to one.
    """
    a = np.arange(1, n_annuli + 1)
    return np.sin(np.pi / (2 * n_annuli)) * np.sin(np.pi * (2 * a - 1) / (2 * n_annuli))


def sector_sky_fraction(horizon_elevation: float, n_annuli: int = 90) -> float:
    """Visible share of one azimuth sector given its horizon elevation (radians).

    Sums the ring weights above the horizon, taking the cut ring
    fractionally in sin^2 so the sum telescopes to ``cos(h)**2``.
    """
    h = min(max(horizon_elevation, 0.0), math.pi / 2)
    w = annulus_weights(n_annuli)
    limit = (math.pi / 2 - h) / (math.pi / 2) * n_annuli
    full = int(math.floor(limit))
    total = float(np.sum(w[:full]))
    if full < n_annuli:
        lo = full * math.pi / (2 * n_annuli)
        total += math.sin(math.pi / 2 - h) ** 2 - math.sin(lo) ** 2
    return total


def _fill_nodata(grid: Grid) -> np.ndarray:
    vals = grid.masked()
    if not np.isfinite(vals).any():
        raise ValueError("surface model has no valid cells")
    return np.where(np.isfinite(vals), vals, np.nanmin(vals))


def _directions(n: int) -> tuple[np.ndarray, np.ndarray]:
    az = 2 * np.pi * np.arange(n) / n
    return np.sin(az), np.cos(az)


def svf_layers(dsm: Grid, cdsm: Grid | None = None, cfg: SvfConfig = SvfConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Building-only SVF and building+vegetation SVF as raw arrays."""
    require_aligned(dsm, cdsm)
    cs = dsm.cell_size
    build = _fill_nodata(dsm) / cs
    if cdsm is not None:
        canopy = np.where(cdsm.mask, np.maximum(cdsm.values, 0.0), 0.0)
        veg = build + canopy / cs
        use_veg = bool((canopy > 0).any())
    else:
        veg = build
        use_veg = False
    s, c = _directions(cfg.directions)
    out_b = np.empty(dsm.shape)
    out_bv = np.empty(dsm.shape)
    horizon_svf(np.ascontiguousarray(build), np.ascontiguousarray(veg), use_veg, s, c, cfg.search_radius / cs,
                cfg.observer_height / cs, out_b, out_bv)
    return out_b, out_bv


def compute_svf(dsm: Grid, cdsm: Grid | None = None, cfg: SvfConfig = SvfConfig()) -> Grid:
    """Sky view factor at pedestrian height for every cell of ``dsm``.

    ``cdsm`` holds canopy height above the local surface (0 where there is no
    tree). Vegetation lets ``canopy_transmissivity`` of the sky it covers
    through::

        svf = svf_build - (1 - tau) * (svf_build - svf_build_veg)

    Rooftop and water cells are computed like any other; mask them when
    aggregating.
    """
    svf_b, svf_bv = svf_layers(dsm, cdsm, cfg)
    tau = cfg.canopy_transmissivity
    out = svf_b - (1.0 - tau) * (svf_b - svf_bv)
    out = np.clip(out, 0.0, 1.0)
    out[~dsm.mask] = np.nan
    return Grid.from_masked(out, dsm)


def floor_count(height: np.ndarray, floor_height: float) -> np.ndarray:
    """Storeys per building cell: ``max(1, round(h / floor_height))``, 0 where h <= 0."""
    floors = np.maximum(1.0, np.round(height / floor_height))
    return np.where(height > 0, floors, 0.0)


def zone_morphometrics(
    bh: Grid,
    ch: Grid,
    zone_raster: Grid,
    floor_height: float = 3.0,
    land_mask: Grid | None = None,
) -> FeatureTable:
    """Building and canopy statistics per zone.

    Columns: BH, BH_sd, BD, FAR, CH, CH_sd, CD. Heights are averaged over
    cells with height > 0 and their spread uses the N-1 denominator.
    Densities are shares of the zone's land cells (``land_mask`` == 1, all
    cells when omitted). Zones without land cells get NaN everywhere.
    """
    require_aligned(bh, ch, zone_raster, land_mask)
    if floor_height <= 0:
        raise ValueError("floor_height must be > 0")
    zones = zone_raster.values
    ids = np.unique(zones[zone_raster.mask]).astype(np.int64)
    land = np.ones(zones.shape, dtype=bool) if land_mask is None else (land_mask.values == 1) & land_mask.mask
    bhv = np.where(bh.mask, bh.values, 0.0)
    chv = np.where(ch.mask, ch.values, 0.0)
    cell_area = bh.cell_size ** 2
    x, y = zone_raster.cell_centers()

    cols = {k: np.full(ids.size, np.nan) for k in ("BH", "BH_sd", "BD", "FAR", "CH", "CH_sd", "CD")}
    cx = np.full(ids.size, np.nan)
    cy = np.full(ids.size, np.nan)
    for i, zid in enumerate(ids):
        inzone = zones == zid
        cx[i] = x[inzone].mean()
        cy[i] = y[inzone].mean()
        sel = inzone & land
        n_land = int(sel.sum())
        if n_land == 0:
            continue
        b = bhv[sel]
        t = chv[sel]
        bld = b[b > 0]
        can = t[t > 0]
        cols["BD"][i] = bld.size / n_land
        cols["CD"][i] = can.size / n_land
        cols["FAR"][i] = float(np.sum(cell_area * floor_count(b, floor_height))) / (n_land * cell_area)
        if bld.size:
            cols["BH"][i] = bld.mean()
            cols["BH_sd"][i] = bld.std(ddof=1) if bld.size > 1 else np.nan
        if can.size:
            cols["CH"][i] = can.mean()
            cols["CH_sd"][i] = can.std(ddof=1) if can.size > 1 else np.nan
    return FeatureTable(ids, cols, cx, cy)
