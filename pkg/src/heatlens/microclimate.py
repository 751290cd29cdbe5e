"""Pedestrian radiation budget, mean radiant temperature and UTCI.

The radiation closure is a reduced SOLWEIG-style model: walls and ground
radiate at air temperature, the sky is isotropic and vegetation only acts
through the beam transmission and the SVF.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from ._raycast import sun_transmission
from .raster import Grid, require_aligned

SIGMA = 5.67e-8
KELVIN = 273.15

# order used everywhere a six-directional quantity is stored
DIRECTIONS = ("N", "S", "E", "W", "up", "down")
VIEW_FACTORS = {"N": 0.22, "S": 0.22, "E": 0.22, "W": 0.22, "up": 0.06, "down": 0.06}
# azimuth a vertical face of the body looks towards
FACE_AZIMUTH = {"N": 0.0, "E": 90.0, "S": 180.0, "W": 270.0}


@dataclass(frozen=True)
class MeteoSample:
    """One hour of forcing at a single node. ``timestamp`` is timezone-aware UTC."""

    timestamp: datetime
    ta: float
    rh: float
    wind10: float
    ghi: float
    dni: float
    dhi: float

    def __post_init__(self):
        if self.timestamp.tzinfo is None:
            object.__setattr__(self, "timestamp", self.timestamp.replace(tzinfo=timezone.utc))
        if not 0.0 <= self.rh <= 100.0:
            raise ValueError(f"RH must lie in [0, 100], got {self.rh}")
        for name in ("wind10", "ghi", "dni", "dhi"):
            v = getattr(self, name)
            if not v >= 0:
                raise ValueError(f"{name} must be >= 0, got {v}")


def read_meteo(path) -> list[MeteoSample]:
    """Read ``timestamp,ta,rh,wind10,ghi,dni,dhi`` rows; naive timestamps are taken as UTC."""
    path = Path(path)
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"timestamp", "ta", "rh", "wind10", "ghi", "dni", "dhi"}
        missing = need - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing column(s) {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                ts = datetime.fromisoformat(row["timestamp"].strip().replace("Z", "+00:00"))
                out.append(MeteoSample(ts, *(float(row[k]) for k in ("ta", "rh", "wind10", "ghi", "dni", "dhi"))))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out


@dataclass(frozen=True)
class BodyConstants:
    absorption_k: float = 0.7
    emissivity: float = 0.97
    sigma: float = SIGMA


@dataclass
class RadiationField:
    """Short- and longwave flux received from each of six directions (W/m2).

    ``up`` is what reaches the body from the upper hemisphere (K and L
    downwelling); ``down`` is what comes from the ground.
    """

    K: dict[str, Grid]
    L: dict[str, Grid]
    view_factors: dict[str, float] = field(default_factory=lambda: dict(VIEW_FACTORS))

    def __post_init__(self):
        for d in DIRECTIONS:
            if d not in self.K or d not in self.L or d not in self.view_factors:
                raise ValueError(f"radiation field lacks direction {d!r}")
        total = sum(self.view_factors[d] for d in DIRECTIONS)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"view factors sum to {total}, expected 1")
        require_aligned(*self.K.values(), *self.L.values())


# ---------------------------------------------------------------- sun


def _julian_day(ts: datetime) -> float:
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.timestamp() / 86400.0 + 2440587.5


def solar_position(lat: float, lon: float, timestamp: datetime) -> tuple[float, float]:
    """Sun azimuth (degrees clockwise from north) and geometric altitude (degrees).

    Low-precision almanac series for the sun's ecliptic longitude and
    Greenwich mean sidereal time; good to about 0.01 degrees over 1950-2050.
    No refraction correction is applied.
    """
    if abs(lat) > 90:
        raise ValueError(f"latitude must lie in [-90, 90], got {lat}")
    n = _julian_day(timestamp) - 2451545.0
    mean_lon = (280.460 + 0.9856474 * n) % 360.0
    g = math.radians((357.528 + 0.9856003 * n) % 360.0)
    ecl = math.radians(mean_lon + 1.915 * math.sin(g) + 0.020 * math.sin(2 * g))
    eps = math.radians(23.439 - 4.0e-7 * n)
    ra = math.degrees(math.atan2(math.cos(eps) * math.sin(ecl), math.cos(ecl)))
    dec = math.asin(math.sin(eps) * math.sin(ecl))
    gmst = (280.46061837 + 360.98564736629 * n) % 360.0
    ha = math.radians(((gmst + lon - ra + 180.0) % 360.0) - 180.0)
    phi = math.radians(lat)
    sin_alt = math.sin(dec) * math.sin(phi) + math.cos(dec) * math.cos(phi) * math.cos(ha)
    alt = math.degrees(math.asin(max(-1.0, min(1.0, sin_alt))))
    az = math.degrees(math.atan2(-math.sin(ha) * math.cos(dec),
                                 math.sin(dec) * math.cos(phi) - math.cos(dec) * math.sin(phi) * math.cos(ha)))
    return az % 360.0, alt


def cast_shadows(dsm: Grid, cdsm: Grid | None, azimuth: float, altitude: float, tau: float = 0.03) -> Grid:
    """Beam transmission towards the sun for every cell.

    1 in the sun, 0 where a building blocks the ray and ``tau`` where only
    canopy does (cells under their own canopy included). The ray starts at
    the ground surface and is marched over the bilinear DSM. A sun at or
    below the horizon gives zero everywhere.
    """
    require_aligned(dsm, cdsm)
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    cs = dsm.cell_size
    vals = dsm.masked()
    build = np.where(np.isfinite(vals), vals, np.nanmin(vals)) / cs
    if cdsm is not None:
        canopy = np.where(cdsm.mask, np.maximum(cdsm.values, 0.0), 0.0) / cs
    else:
        canopy = np.zeros(dsm.shape)
    here = canopy > 0
    use_veg = bool(here.any())
    if altitude <= 0:
        out = np.zeros(dsm.shape)
    elif altitude >= 90.0 - 1e-9:
        out = np.where(here, tau, 1.0)
    else:
        a = math.radians(azimuth)
        out = np.empty(dsm.shape)
        sun_transmission(np.ascontiguousarray(build), np.ascontiguousarray(build + canopy), use_veg, here,
                         math.sin(a), math.cos(a), math.tan(math.radians(altitude)), float(sum(dsm.shape)),
                         tau, out)
    return Grid.from_masked(np.where(dsm.mask, out, np.nan), dsm)


# ---------------------------------------------------------------- radiation


def vapour_pressure_magnus(ta, rh):
    """Actual vapour pressure over water in hPa (Magnus form)."""
    return 6.1094 * np.exp(17.625 * np.asarray(ta) / (np.asarray(ta) + 243.04)) * np.asarray(rh) / 100.0


def sky_emissivity(ta: float, rh: float) -> float:
    """Clear-sky emissivity, Brutsaert form with vapour pressure in hPa; capped at 1."""
    e = float(vapour_pressure_magnus(ta, rh))
    return min(1.0, 1.24 * (e / (ta + KELVIN)) ** (1.0 / 7.0))


def directional_fluxes(
    dsm: Grid,
    cdsm: Grid | None,
    svf: Grid,
    shadow: Grid,
    meteo: MeteoSample,
    surface_albedo: Grid,
    sun: tuple[float, float],
) -> RadiationField:
    """Six-directional short- and longwave fluxes for one hour.

    With the sun at or below the horizon every shortwave flux is zero.
    """
    require_aligned(dsm, cdsm, svf, shadow, surface_albedo)
    azimuth, altitude = sun
    s = np.clip(svf.masked(), 0.0, 1.0)
    sh = shadow.masked()
    alb = surface_albedo.masked()
    zero = np.zeros(dsm.shape)
    K = {}
    if altitude > 0:
        alt = math.radians(altitude)
        k_down = sh * meteo.dni * math.sin(alt) + meteo.dhi * s
        diffuse_side = 0.5 * meteo.dhi * (1.0 - s)
        for d, phi in FACE_AZIMUTH.items():
            facing = max(0.0, math.cos(math.radians(azimuth - phi)))
            K[d] = sh * meteo.dni * math.cos(alt) * facing + diffuse_side
        K["up"] = k_down
        K["down"] = alb * k_down
    else:
        K = {d: zero for d in DIRECTIONS}

    tk4 = SIGMA * (meteo.ta + KELVIN) ** 4
    l_ground = np.full(dsm.shape, tk4)
    l_sky = sky_emissivity(meteo.ta, meteo.rh) * tk4 * s + tk4 * (1.0 - s)
    L = {"up": l_sky, "down": l_ground}
    side = 0.5 * (l_ground + l_sky)
    for d in FACE_AZIMUTH:
        L[d] = side
    to_grid = lambda a: Grid.from_masked(a, dsm)  # noqa: E731
    return RadiationField({d: to_grid(K[d]) for d in DIRECTIONS}, {d: to_grid(L[d]) for d in DIRECTIONS})


def mean_radiant_temperature(rad: RadiationField, body: BodyConstants = BodyConstants()) -> Grid:
    """Tmrt in degrees C from absorbed radiant flux density; -273.15 where it is not positive."""
    like = rad.K[DIRECTIONS[0]]
    r = np.zeros(like.shape)
    for d in DIRECTIONS:
        f = rad.view_factors[d]
        r = r + body.absorption_k * rad.K[d].masked() * f + body.emissivity * rad.L[d].masked() * f
    with np.errstate(invalid="ignore"):
        t = np.where(r > 0, np.power(np.maximum(r, 0.0) / (body.emissivity * body.sigma), 0.25), 0.0) - KELVIN
    return Grid.from_masked(np.where(np.isfinite(r), t, np.nan), like)


# ---------------------------------------------------------------- UTCI

UTCI_TABLE = "utci_poly.txt"
UTCI_SHA256 = "877ac59d2f667ac09f7b62fd652ac7ced6a090b93053ffafbfe82f18ca158193"

TA_RANGE = (-50.0, 50.0)
DT_RANGE = (-30.0, 70.0)
WIND_RANGE = (0.5, 17.0)

_coef_cache: dict[str, np.ndarray] = {}


def load_utci_coefficients(path=None) -> np.ndarray:
    """Rows of ``(i, j, k, l, coef)`` from the shipped table, checked against its sha256."""
    key = str(path)
    if key in _coef_cache:
        return _coef_cache[key]
    if path is None:
        raw = resources.files("heatlens").joinpath("data", UTCI_TABLE).read_bytes()
        where = UTCI_TABLE
    else:
        raw = Path(path).read_bytes()
        where = str(path)
    digest = hashlib.sha256(raw).hexdigest()
    if digest != UTCI_SHA256:
        raise RuntimeError(f"UTCI coefficient table {where}: checksum mismatch (got {digest}, expected {UTCI_SHA256})")
    rows = [line.split() for line in raw.decode().splitlines() if line.strip() and not line.startswith("#")]
    table = np.array([[float(x) for x in r] for r in rows])
    if table.shape != (210, 5):
        raise RuntimeError(f"UTCI coefficient table {where}: expected 210 terms, found {table.shape[0]}")
    _coef_cache[key] = table
    return table


_SAT_G = (-2836.5744, -6028.076559, 19.54263612, -0.02737830188, 1.6261698e-5, 7.0229056e-10, -1.8680009e-13)


def saturation_vapour_pressure(ta):
    """Saturation vapour pressure over water in hPa, as used by the operational UTCI code."""
    tk = np.asarray(ta, dtype=np.float64) + KELVIN
    es = 2.7150305 * np.log(tk)
    for i, g in enumerate(_SAT_G):
        es = es + g * tk ** (i - 2)
    return np.exp(es) * 0.01


@dataclass
class UtciResult:
    """UTCI in degrees C and whether any input had to be clamped into the fit range."""

    utci: np.ndarray | float
    clamped: np.ndarray | bool


def utci(ta, tmrt, wind10, rh) -> UtciResult:
    """Operational UTCI polynomial, vectorised over broadcastable inputs.

    Inputs outside the fit range (Ta in [-50, 50], Tmrt - Ta in [-30, 70],
    wind in [0.5, 17]) are clamped and flagged. NaN inputs give NaN.
    """
    ta, tmrt, wind10, rh = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (ta, tmrt, wind10, rh)))
    scalar = ta.ndim == 0
    t = np.clip(ta, *TA_RANGE)
    dt = np.clip(tmrt - ta, *DT_RANGE)
    va = np.clip(wind10, *WIND_RANGE)
    with np.errstate(invalid="ignore"):
        clamped = (t != ta) | (dt != tmrt - ta) | (va != wind10)
    pa = saturation_vapour_pressure(t) * rh / 1000.0  # kPa

    table = load_utci_coefficients()
    pw = [[np.ones_like(t)], [np.ones_like(t)], [np.ones_like(t)], [np.ones_like(t)]]
    for p, base in zip(pw, (t, dt, va, pa)):
        for _ in range(6):
            p.append(p[-1] * base)
    acc = np.zeros_like(t)
    for i, j, k, l, c in table:
        acc = acc + c * pw[0][int(i)] * pw[1][int(j)] * pw[2][int(k)] * pw[3][int(l)]
    out = t + acc
    if scalar:
        return UtciResult(float(out), bool(clamped))
    return UtciResult(out, clamped)


# left-closed lower edges, coldest first
UTCI_BANDS = (
    (-math.inf, "extreme cold stress"),
    (-40.0, "very strong cold stress"),
    (-27.0, "strong cold stress"),
    (-13.0, "moderate cold stress"),
    (0.0, "slight cold stress"),
    (9.0, "no thermal stress"),
    (26.0, "moderate heat stress"),
    (32.0, "strong heat stress"),
    (38.0, "very strong heat stress"),
    (46.0, "extreme heat stress"),
)


def utci_category(u: float) -> str:
    """Stress band of a UTCI value; each band includes its lower edge."""
    if not math.isfinite(u):
        raise ValueError(f"UTCI must be finite, got {u}")
    label = UTCI_BANDS[0][1]
    for edge, name in UTCI_BANDS:
        if u >= edge:
            label = name
    return label


def utci_category_codes(u) -> np.ndarray:
    """Band index (0 = extreme cold ... 9 = extreme heat) per value; -1 for NaN."""
    u = np.asarray(u, dtype=np.float64)
    edges = np.array([e for e, _ in UTCI_BANDS[1:]])
    codes = np.searchsorted(edges, u, side="right")
    return np.where(np.isfinite(u), codes, -1)


# ---------------------------------------------------------------- hourly chain


@dataclass(frozen=True)
class Site:
    lat: float = 1.3521
    lon: float = 103.8198
    utc_offset: float = 8.0  # hours, used to pick local clock hours


def samples_at_hour(samples: Iterable[MeteoSample], hour: int, utc_offset: float = 0.0,
                    month: int | None = None) -> list[MeteoSample]:
    """Samples whose local clock time is ``hour``:00, optionally within one month."""
    shift = timedelta(hours=utc_offset)
    out = []
    for s in samples:
        local = s.timestamp.astimezone(timezone.utc) + shift
        if local.hour == hour and local.minute == 0 and (month is None or local.month == month):
            out.append(s)
    return out


def utci_map(
    dsm: Grid,
    cdsm: Grid | None,
    svf: Grid,
    albedo: Grid,
    meteo: MeteoSample,
    site: Site = Site(),
    body: BodyConstants = BodyConstants(),
    tau: float = 0.03,
) -> tuple[Grid, Grid, int]:
    """UTCI and Tmrt grids for one hour, plus the number of clamped cells."""
    az, alt = solar_position(site.lat, site.lon, meteo.timestamp)
    shadow = cast_shadows(dsm, cdsm, az, alt, tau)
    rad = directional_fluxes(dsm, cdsm, svf, shadow, meteo, albedo, (az, alt))
    tmrt = mean_radiant_temperature(rad, body)
    res = utci(meteo.ta, tmrt.masked(), meteo.wind10, meteo.rh)
    return Grid.from_masked(res.utci, dsm), tmrt, int(np.sum(res.clamped))


def mean_of_grids(grids: Sequence[Grid]) -> Grid:
    """Cellwise mean accumulated in list order, so the result is reproducible."""
    if not grids:
        raise ValueError("no grids to average")
    require_aligned(*grids)
    acc = np.zeros(grids[0].shape)
    for g in grids:
        acc = acc + g.masked()
    return Grid.from_masked(acc / len(grids), grids[0])


def mean_utci_at_hour(
    dsm: Grid,
    cdsm: Grid | None,
    svf: Grid,
    albedo: Grid,
    samples: Sequence[MeteoSample],
    hour: int = 11,
    site: Site = Site(),
    month: int | None = None,
    body: BodyConstants = BodyConstants(),
    tau: float = 0.03,
    on_clamp: Callable[[MeteoSample, int], None] | None = None,
) -> Grid:
    """Average of the hourly UTCI maps at one local clock hour."""
    chosen = samples_at_hour(samples, hour, site.utc_offset, month)
    if not chosen:
        raise ValueError(f"no meteo samples at local hour {hour}")
    maps = []
    for s in chosen:
        u, _, n_clamped = utci_map(dsm, cdsm, svf, albedo, s, site, body, tau)
        if n_clamped and on_clamp is not None:
            on_clamp(s, n_clamped)
        maps.append(u)
    return mean_of_grids(maps)
