"""Spectral and environmental covariates from surface reflectance bands."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

from .raster import Grid, read_grid, require_aligned

BAND_NAMES = ("blue", "green", "red", "nir", "swir1", "swir2")

# broadband albedo from OLI reflectances
ALBEDO_COEF = {"blue": 0.2453, "green": 0.0508, "red": 0.1804, "nir": 0.3081, "swir1": 0.1332, "swir2": 0.0521}
ALBEDO_OFFSET = 0.0011

# tasselled-cap wetness
WET_COEF = {"blue": 0.1511, "green": 0.1972, "red": 0.3283, "nir": 0.3407, "swir1": -0.7117, "swir2": -0.4559}

REQUIRED = {
    "NDVI": ("red", "nir"),
    "NDBI": ("swir1", "nir"),
    "WET": BAND_NAMES,
    "ALBEDO": BAND_NAMES,
}


class BandStack(dict):
    """Mapping of band name to reflectance :class:`Grid`, all sharing one georeference."""

    def __init__(self, bands: Mapping[str, Grid]):
        super().__init__({k.lower(): v for k, v in bands.items()})
        unknown = set(self) - set(BAND_NAMES)
        if unknown:
            raise ValueError(f"unknown band name(s): {sorted(unknown)}")
        require_aligned(*self.values())

    @classmethod
    def from_json(cls, path) -> "BandStack":
        """Load ``{"red": "red.asc", ...}``; relative paths resolve against the JSON file."""
        path = Path(path)
        spec = json.loads(path.read_text())
        return cls({name: read_grid(path.parent / p) for name, p in spec.items()})

    def require(self, *names: str) -> None:
        for name in names:
            if name not in self:
                raise KeyError(f"missing band {name!r}")


def compute_index(kind: str, bands: BandStack) -> Grid:
    """Evaluate NDVI, NDBI, WET or ALBEDO cell by cell.

    Nodata in any required band gives nodata; a zero denominator in the
    normalised-difference indices gives nodata as well. NDVI and NDBI are
    clamped to [-1, 1] to absorb rounding.
    """
    kind = kind.upper()
    if kind not in REQUIRED:
        raise ValueError(f"unknown index {kind!r}; expected one of {sorted(REQUIRED)}")
    if not isinstance(bands, BandStack):
        bands = BandStack(bands)
    names = REQUIRED[kind]
    bands.require(*names)
    like = bands[names[0]]
    v = {n: bands[n].masked() for n in names}

    if kind in ("NDVI", "NDBI"):
        a, b = (v["nir"], v["red"]) if kind == "NDVI" else (v["swir1"], v["nir"])
        den = a + b
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(den != 0, (a - b) / den, np.nan)
        out = np.clip(out, -1.0, 1.0)
    elif kind == "ALBEDO":
        out = sum(ALBEDO_COEF[n] * v[n] for n in BAND_NAMES) + ALBEDO_OFFSET
    else:
        out = sum(WET_COEF[n] * v[n] for n in BAND_NAMES)
    return Grid.from_masked(out, like)
