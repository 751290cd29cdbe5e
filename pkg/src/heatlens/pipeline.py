"""Configuration-driven end-to-end run: features, heat-stress maps, spatial
statistics, global and local models, and their explanations.

Every stage writes into a scratch directory next to the output directory.
On success the files move into place together with ``manifest.json``; on
failure they move over with a ``.partial`` suffix and the error names the
stage that broke.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
import shutil
import sys
import warnings
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .boosting import FitConfig, expand_grid, fit, gain_importance, nested_cv, save_model
from .explain import (
    gam_fit,
    local_importance_maps,
    transition_point,
    tree_shap,
    write_local_primary,
    write_outputs,
    write_transition_points,
)
from .gwboost import DEFAULT_CANDIDATES, OOB_MODES, global_oob, gw_fit, loo_bandwidth, residual_moran
from .gwr import gwr_bandwidth_search, gwr_fit
from .indices import BandStack, compute_index
from .landscape import zone_landscape_metrics, write_zone_metrics
from .microclimate import Site, mean_utci_at_hour, read_meteo
from .morphology import SvfConfig, compute_svf, zone_morphometrics
from .raster import (
    Grid,
    ZoneSet,
    distance_to_mask,
    rasterize_zones,
    read_grid,
    read_zones,
    require_aligned,
    resample_bilinear,
    write_grid,
)
from .spatial import SCHEMES, build_weights, global_moran, lisa
from .table import FeatureTable
from .zonal import binned_median_iqr, rooftop_mask, water_mask, write_mismatch_csv, zonal_table

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

STAGES = ("features", "svf", "utci", "zonal", "moran", "gwr", "global_model", "gw_boost", "shap", "gam")

DEFAULT_FEATURES = (
    "NDVI", "NDBI", "WET", "ALBEDO", "SVF", "BH", "BD", "FAR", "CH", "CD", "D_sea",
    "PD", "LSI", "CONTAG", "SHDI", "PopD", "RD", "IntD", "RNC",
)
GWR_FEATURES = ("NDVI", "SVF", "BH", "BD", "CD", "D_sea")
TARGETS = ("LST_mean", "UTCI_mean")
REQUIRED_INPUTS = ("dsm", "landcover", "bands", "lst", "zones", "meteo")
OPTIONAL_INPUTS = ("cdsm", "socio")


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class InputPaths:
    dsm: Path
    landcover: Path
    bands: Path
    lst: Path
    zones: Path
    meteo: Path
    cdsm: Path | None = None
    socio: Path | None = None

    def items(self) -> list[tuple[str, Path]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self) if getattr(self, f.name) is not None]


@dataclass(frozen=True)
class PipelineConfig:
    seed: int
    inputs: InputPaths
    output_dir: Path
    n_jobs: int = 1
    svf: SvfConfig = SvfConfig()
    utci_hour: int = 11
    utci_month: int | None = None
    site: Site = Site()
    building_class: int = 2
    water_classes: tuple[int, ...] = (5,)
    floor_height: float = 3.0
    weights: str = "queen_nn_hybrid"
    permutations: int = 999
    targets: tuple[str, ...] = TARGETS
    features: tuple[str, ...] | None = None  # None: every default feature present in the data
    gwr_features: tuple[str, ...] | None = None  # None: GWR_FEATURES present among the model features
    outer_folds: int = 5
    inner_folds: int = 5
    kernel_candidates: tuple[int, ...] = DEFAULT_CANDIDATES
    oob: str = "holdout"
    fit: FitConfig = FitConfig()
    grid: dict[str, tuple] = field(default_factory=lambda: {"max_depth": (2, 3, 4)})
    explain_features: tuple[str, ...] = ("SVF", "NDVI")
    signed_feature: str | None = "SVF"
    gam_knots: int = 10

    def check_inputs(self) -> None:
        for name, path in self.inputs.items():
            if not path.is_file():
                raise ConfigError(f"input '{name}' not found: {path}")

    def echo(self) -> dict:
        """Plain-data view of the config with input paths reduced to file names."""
        out = {
            "seed": self.seed,
            "inputs": {k: p.name for k, p in self.inputs.items()},
            "n_jobs": self.n_jobs,
            "svf": asdict(self.svf),
            "utci": {"hour": self.utci_hour, "month": self.utci_month, **asdict(self.site)},
            "landcover": {"building_class": self.building_class, "water_classes": list(self.water_classes),
                          "floor_height": self.floor_height},
            "spatial": {"weights": self.weights, "permutations": self.permutations},
            "model": {"targets": list(self.targets), "features": None if self.features is None else list(self.features),
                      "gwr_features": None if self.gwr_features is None else list(self.gwr_features),
                      "outer_folds": self.outer_folds, "inner_folds": self.inner_folds,
                      "kernel_candidates": list(self.kernel_candidates), "oob": self.oob,
                      "fit": {k: v for k, v in asdict(self.fit).items() if k != "seed"},
                      "grid": {k: list(v) for k, v in self.grid.items()}},
            "explain": {"features": list(self.explain_features), "signed_feature": self.signed_feature,
                        "gam_knots": self.gam_knots},
        }
        return out


# --------------------------------------------------------------------------- config parsing

_SECTIONS: dict[str, set[str]] = {
    "": {"seed", "output_dir", "n_jobs", "inputs", "svf", "utci", "landcover", "spatial", "model", "explain"},
    "inputs": set(REQUIRED_INPUTS) | set(OPTIONAL_INPUTS),
    "svf": {"directions", "search_radius", "canopy_transmissivity"},
    "utci": {"hour", "month", "lat", "lon", "utc_offset"},
    "landcover": {"building_class", "water_classes", "floor_height"},
    "spatial": {"weights", "permutations"},
    "model": {"targets", "features", "gwr_features", "outer_folds", "inner_folds", "kernel_candidates", "oob", "fit", "grid"},
    "model.fit": {f.name for f in fields(FitConfig)} - {"seed"},
    "explain": {"features", "signed_feature", "gam_knots"},
}


def _check_keys(table: dict, section: str) -> None:
    allowed = _SECTIONS[section]
    for key in table:
        if key not in allowed:
            where = f"{section}.{key}" if section else key
            hint = " (the seed is set once at the top level)" if section == "model.fit" and key == "seed" else ""
            raise ConfigError(f"unknown key: {where}{hint}")


def _section(raw: dict, name: str) -> dict:
    v = raw.get(name, {})
    if not isinstance(v, dict):
        raise ConfigError(f"'{name}' must be a table")
    return v


def _typed(value, kind, key: str):
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}")
        return value
    raise TypeError(kind)


def _typed_list(value, kind, key: str) -> tuple:
    if not isinstance(value, list):
        raise ConfigError(f"{key} must be a list, got {value!r}")
    return tuple(_typed(v, kind, f"{key}[]") for v in value)


def validate_config(path) -> PipelineConfig:
    """Parse and check a TOML run configuration.

    Input paths resolve against the config file's directory and must exist.
    Unknown keys and a missing ``seed`` are errors.
    """
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: not valid TOML: {e}") from None
    base = path.parent
    _check_keys(raw, "")
    if "seed" not in raw:
        raise ConfigError("missing key: seed")
    seed = _typed(raw["seed"], int, "seed")
    if seed < 0:
        raise ConfigError("seed must be >= 0")

    inp = _section(raw, "inputs")
    _check_keys(inp, "inputs")
    for key in REQUIRED_INPUTS:
        if key not in inp:
            raise ConfigError(f"missing key: inputs.{key}")
    resolved = {k: (base / _typed(v, str, f"inputs.{k}")) for k, v in inp.items()}
    inputs = InputPaths(**resolved)

    kw: dict[str, Any] = {}
    if "n_jobs" in raw:
        kw["n_jobs"] = _typed(raw["n_jobs"], int, "n_jobs")
        if kw["n_jobs"] < 1:
            raise ConfigError("n_jobs must be >= 1")

    svf = _section(raw, "svf")
    _check_keys(svf, "svf")
    try:
        kw["svf"] = SvfConfig(
            directions=_typed(svf.get("directions", 360), int, "svf.directions"),
            search_radius=_typed(svf.get("search_radius", 150.0), float, "svf.search_radius"),
            canopy_transmissivity=_typed(svf.get("canopy_transmissivity", 0.03), float, "svf.canopy_transmissivity"),
        )
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(f"svf: {e}") from None

    ut = _section(raw, "utci")
    _check_keys(ut, "utci")
    if "hour" in ut:
        kw["utci_hour"] = _typed(ut["hour"], int, "utci.hour")
        if not 0 <= kw["utci_hour"] <= 23:
            raise ConfigError("utci.hour must lie in 0..23")
    if "month" in ut:
        kw["utci_month"] = _typed(ut["month"], int, "utci.month")
        if not 1 <= kw["utci_month"] <= 12:
            raise ConfigError("utci.month must lie in 1..12")
    d = Site()
    kw["site"] = Site(
        lat=_typed(ut.get("lat", d.lat), float, "utci.lat"),
        lon=_typed(ut.get("lon", d.lon), float, "utci.lon"),
        utc_offset=_typed(ut.get("utc_offset", d.utc_offset), float, "utci.utc_offset"),
    )

    lc = _section(raw, "landcover")
    _check_keys(lc, "landcover")
    if "building_class" in lc:
        kw["building_class"] = _typed(lc["building_class"], int, "landcover.building_class")
    if "water_classes" in lc:
        kw["water_classes"] = _typed_list(lc["water_classes"], int, "landcover.water_classes")
    if "floor_height" in lc:
        kw["floor_height"] = _typed(lc["floor_height"], float, "landcover.floor_height")
        if not kw["floor_height"] > 0:
            raise ConfigError("landcover.floor_height must be > 0")

    sp = _section(raw, "spatial")
    _check_keys(sp, "spatial")
    if "weights" in sp:
        kw["weights"] = _typed(sp["weights"], str, "spatial.weights")
        if kw["weights"] not in SCHEMES:
            raise ConfigError(f"spatial.weights must be one of {SCHEMES}")
    if "permutations" in sp:
        kw["permutations"] = _typed(sp["permutations"], int, "spatial.permutations")
        if kw["permutations"] < 0:
            raise ConfigError("spatial.permutations must be >= 0")

    mo = _section(raw, "model")
    _check_keys(mo, "model")
    if "targets" in mo:
        kw["targets"] = _typed_list(mo["targets"], str, "model.targets")
        bad = [t for t in kw["targets"] if t not in TARGETS]
        if bad or not kw["targets"]:
            raise ConfigError(f"model.targets must be a non-empty subset of {TARGETS}, got {bad}")
    for key in ("features", "gwr_features"):
        if key in mo:
            kw[key] = _typed_list(mo[key], str, f"model.{key}")
            if not kw[key]:
                raise ConfigError(f"model.{key} is empty")
    for key in ("outer_folds", "inner_folds"):
        if key in mo:
            kw[key] = _typed(mo[key], int, f"model.{key}")
            if kw[key] < 2:
                raise ConfigError(f"model.{key} must be >= 2")
    if "kernel_candidates" in mo:
        kw["kernel_candidates"] = _typed_list(mo["kernel_candidates"], int, "model.kernel_candidates")
        if not kw["kernel_candidates"] or min(kw["kernel_candidates"]) < 10:
            raise ConfigError("model.kernel_candidates must be a non-empty list of integers >= 10")
    if "oob" in mo:
        kw["oob"] = _typed(mo["oob"], str, "model.oob")
        if kw["oob"] not in OOB_MODES:
            raise ConfigError(f"model.oob must be one of {OOB_MODES}")
    fit_tab = mo.get("fit", {})
    if not isinstance(fit_tab, dict):
        raise ConfigError("'model.fit' must be a table")
    _check_keys(fit_tab, "model.fit")
    try:
        kw["fit"] = FitConfig.from_mapping({**fit_tab, "seed": 0})
    except (ValueError, TypeError) as e:
        raise ConfigError(f"model.fit: {e}") from None
    grid = mo.get("grid")
    if grid is not None:
        if not isinstance(grid, dict) or not grid:
            raise ConfigError("'model.grid' must be a non-empty table of option lists")
        for key, vals in grid.items():
            if key not in _SECTIONS["model.fit"]:
                raise ConfigError(f"unknown key: model.grid.{key}")
            if not isinstance(vals, list) or not vals:
                raise ConfigError(f"model.grid.{key} must be a non-empty list")
        try:
            expand_grid(kw["fit"], grid)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"model.grid: {e}") from None
        kw["grid"] = {k: tuple(v) for k, v in grid.items()}

    ex = _section(raw, "explain")
    _check_keys(ex, "explain")
    if "features" in ex:
        kw["explain_features"] = _typed_list(ex["features"], str, "explain.features")
    if "signed_feature" in ex:
        kw["signed_feature"] = _typed(ex["signed_feature"], str, "explain.signed_feature") or None
    if "gam_knots" in ex:
        kw["gam_knots"] = _typed(ex["gam_knots"], int, "explain.gam_knots")
        if kw["gam_knots"] < 4:
            raise ConfigError("explain.gam_knots must be >= 4")

    out = base / _typed(raw.get("output_dir", "out"), str, "output_dir")
    cfg = PipelineConfig(seed=seed, inputs=inputs, output_dir=out, **kw)
    cfg.check_inputs()
    return cfg


# --------------------------------------------------------------------------- helpers


def stage_seed(seed: int, name: str) -> int:
    """Independent 32-bit seed for one named stage, derived from the global seed."""
    return int(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]).generate_state(1)[0])


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fmt(v) -> str:
    return "" if v is None or not np.isfinite(v) else repr(float(v))


def _tag(target: str) -> str:
    return target.split("_")[0].lower()


def _versions() -> dict[str, str]:
    import numba
    import scipy
    import shapely

    return {"heatlens": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__, "shapely": shapely.__version__}


@dataclass
class RunResult:
    output_dir: Path
    manifest: dict
    features: FeatureTable


class _Run:
    """Mutable state threaded through the stages."""

    def __init__(self, cfg: PipelineConfig, work: Path):
        self.cfg = cfg
        self.work = work
        self.grids: dict[str, Grid] = {}
        self.table: FeatureTable | None = None
        self.model_rows: np.ndarray | None = None
        self.features: list[str] = []
        self.gwr_features: list[str] = []
        self.global_models: dict = {}
        self.local_sets: dict = {}
        self.shap: dict = {}
        self.notes: dict[str, Any] = {}
        self.zones = None
        self.weights = None

    def path(self, *parts: str) -> Path:
        p = self.work.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p


# --------------------------------------------------------------------------- stages


def _stage_features(run: _Run) -> None:
    cfg = run.cfg
    dsm = read_grid(cfg.inputs.dsm)
    landcover = read_grid(cfg.inputs.landcover)
    cdsm = read_grid(cfg.inputs.cdsm) if cfg.inputs.cdsm else dsm.with_values(np.zeros(dsm.shape))
    require_aligned(dsm, landcover, cdsm)
    bands = BandStack.from_json(cfg.inputs.bands)
    first = next(iter(bands.values()))
    if not first.aligned_with(dsm):
        bands = BandStack({k: resample_bilinear(g, dsm) for k, g in bands.items()})
    zones = read_zones(cfg.inputs.zones)
    zr = rasterize_zones(zones, dsm)
    if not zr.mask.any():
        raise ValueError("no zone covers any grid cell")

    lc = landcover.values
    bld = (lc == cfg.building_class) & landcover.mask
    bh = dsm.with_values(np.where(bld, np.maximum(dsm.values, 0.0), 0.0))
    ch = cdsm.with_values(np.where(cdsm.mask & ~bld, np.maximum(cdsm.values, 0.0), 0.0))
    water = water_mask(landcover, cfg.water_classes)
    land = landcover.with_values(1.0 - water.values)

    indices = {k: compute_index(k, bands) for k in ("NDVI", "NDBI", "WET", "ALBEDO")}
    grids: dict[str, Grid] = dict(indices)
    if np.any(water.values == 1):
        grids["D_sea"] = distance_to_mask(water)
    table = zonal_table(grids, zr)
    morph = zone_morphometrics(bh, ch, zr, cfg.floor_height, land)
    # a zone without buildings (canopy) has zero mean height for modelling
    morph = morph.with_columns({
        "BH": np.where(morph["BD"] == 0, 0.0, morph["BH"]),
        "CH": np.where(morph["CD"] == 0, 0.0, morph["CH"]),
    })
    table = table.join(morph)

    metrics = zone_landscape_metrics(landcover, zr)
    write_zone_metrics(metrics, run.path("landscape_metrics.csv"))
    cols: dict[str, np.ndarray] = {}
    for name in ("PD", "LSI", "CONTAG", "SHDI", "SHEI"):
        cols[name] = np.array([metrics[int(z)].landscape.get(name, math.nan) if int(z) in metrics else math.nan
                               for z in table.zone_ids])
    classes = sorted({c for m in metrics.values() for c in m.by_class})
    for c in classes:
        cols[f"PLAND_{c}"] = np.array([metrics[int(z)].by_class.get(c, {}).get("PLAND", 0.0) if int(z) in metrics
                                       else math.nan for z in table.zone_ids])
    table = table.with_columns(cols)
    if cfg.inputs.socio:
        socio = FeatureTable.from_csv(cfg.inputs.socio)
        table = table.join(FeatureTable(socio.zone_ids, socio.columns))

    run.grids.update(dsm=dsm, cdsm=cdsm, landcover=landcover, zones=zr, bh=bh, water=water,
                     albedo=indices["ALBEDO"])
    run.table = table
    run.zones = zones


def _stage_svf(run: _Run) -> None:
    g = run.grids
    svf = compute_svf(g["dsm"], g["cdsm"], run.cfg.svf)
    write_grid(svf, run.path("svf.asc"))
    g["svf"] = svf


def _stage_utci(run: _Run) -> None:
    cfg = run.cfg
    g = run.grids
    samples = read_meteo(cfg.inputs.meteo)
    clamped: list[tuple[str, int]] = []
    u = mean_utci_at_hour(g["dsm"], g["cdsm"], g["svf"], g["albedo"], samples, cfg.utci_hour, cfg.site,
                          cfg.utci_month, tau=cfg.svf.canopy_transmissivity,
                          on_clamp=lambda s, k: clamped.append((s.timestamp.isoformat(), k)))
    write_grid(u, run.path("utci_mean.asc"))
    g["utci"] = u
    run.notes["utci_clamped_hours"] = len(clamped)


def _stage_zonal(run: _Run) -> None:
    cfg = run.cfg
    g = run.grids
    lst = read_grid(cfg.inputs.lst)
    if not lst.aligned_with(g["dsm"]):
        lst = resample_bilinear(lst, g["dsm"])
    g["lst"] = lst
    roof = rooftop_mask(g["bh"])
    water = g["water"]
    targets = zonal_table({"SVF": g["svf"], "LST_mean": lst, "UTCI_mean": g["utci"]}, g["zones"],
                          {"SVF": [roof, water], "LST_mean": [water], "UTCI_mean": [roof, water]})
    table = run.table.join(FeatureTable(targets.zone_ids, targets.columns))
    run.table = table
    table.to_csv(run.path("zone_features.csv"))
    write_mismatch_csv(table, run.path("mismatch.csv"))

    # pixel-level curve of UTCI against LST over open ground
    keep = lst.mask & g["utci"].mask & (roof.values != 1) & (water.values != 1) & g["zones"].mask
    summ = binned_median_iqr(lst.values[keep], g["utci"].values[keep], 20)
    with open(run.path("lst_utci_binned.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count", "utci_median", "utci_q25", "utci_q75"])
        for i in range(summ.count.size):
            w.writerow([repr(float(summ.edges[i])), repr(float(summ.edges[i + 1])), int(summ.count[i]),
                        _fmt(summ.median[i]), _fmt(summ.q25[i]), _fmt(summ.q75[i])])

    feats = list(cfg.features) if cfg.features is not None else [f for f in DEFAULT_FEATURES if f in table]
    missing = [f for f in feats if f not in table]
    if missing:
        raise ValueError(f"configured feature(s) not available: {missing}")
    gwr_feats = list(cfg.gwr_features) if cfg.gwr_features is not None else [f for f in GWR_FEATURES if f in feats]
    missing = [f for f in gwr_feats if f not in table]
    if missing:
        raise ValueError(f"configured GWR feature(s) not available: {missing}")
    ok = table.complete_rows(feats + gwr_feats + list(cfg.targets))
    if ok.sum() < 10:
        raise ValueError(f"only {int(ok.sum())} zones have every feature and target; need >= 10")
    run.features = feats
    run.gwr_features = gwr_feats
    run.model_rows = np.flatnonzero(ok)
    run.notes["zones_total"] = len(table)
    run.notes["zones_modelled"] = int(ok.sum())


def _model_table(run: _Run) -> FeatureTable:
    return run.table.select(run.table.zone_ids[run.model_rows])


def _weights(run: _Run, table: FeatureTable):
    ids = set(int(z) for z in table.zone_ids)
    zones = ZoneSet(tuple(z for z in run.zones if z.zone_id in ids))
    return build_weights(zones, run.cfg.weights)


def _stage_moran(run: _Run) -> None:
    cfg = run.cfg
    table = _model_table(run)
    w = _weights(run, table)
    run.weights = w
    order = table.row_index(w.ids)
    with open(run.path("moran.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["target", "I", "expected", "p_value", "permutations"])
        for t in cfg.targets:
            x = table[t][order]
            m = global_moran(x, w, cfg.permutations, stage_seed(cfg.seed, f"moran:{t}"))
            wr.writerow([t, repr(m.I), repr(m.expected), _fmt(m.p_value), m.permutations])
            res = lisa(x, w, cfg.permutations, stage_seed(cfg.seed, f"lisa:{t}"), n_jobs=cfg.n_jobs)
            res.to_csv(run.path(f"lisa_{_tag(t)}.csv"))


def _stage_gwr(run: _Run) -> None:
    table = _model_table(run)
    names = run.gwr_features
    X = table.matrix(names)
    coords = table.coords()
    with open(run.path("gwr_bandwidth.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["target", "bandwidth", "aicc", "r2"])
        for t in run.cfg.targets:
            y = table[t]
            search = gwr_bandwidth_search(X, y, coords, "adaptive")
            res = gwr_fit(X, y, coords, search.best, names=names)
            res.to_csv(run.path(f"gwr_{_tag(t)}.csv"), table.zone_ids)
            r2 = 1.0 - res.rss / float(np.sum((y - y.mean()) ** 2))
            wr.writerow([t, repr(float(search.best.bandwidth)), repr(float(res.aicc)), repr(float(r2))])


def _stage_global_model(run: _Run) -> None:
    cfg = run.cfg
    table = _model_table(run)
    X = table.matrix(run.features)
    with open(run.path("nested_cv.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["target", "fold", "r2", "mae", "rmse", "winner"])
        for t in cfg.targets:
            seed = stage_seed(cfg.seed, f"global:{t}")
            base = FitConfig.from_mapping({**asdict(cfg.fit), "seed": seed})
            res = nested_cv(X, table[t], cfg.grid, cfg.outer_folds, cfg.inner_folds, seed, base)
            for k, (m, win) in enumerate(zip(res.outer, res.winners)):
                wr.writerow([t, k, repr(m.r2), repr(m.mae), repr(m.rmse), _config_label(win, cfg.grid)])
            s = res.summary()
            wr.writerow([t, "mean", repr(s["r2"][0]), repr(s["mae"][0]), repr(s["rmse"][0]),
                         _config_label(res.best, cfg.grid)])
            model = fit(X, table[t], None, res.best, names=run.features)
            save_model(model, run.path("models", f"global_{_tag(t)}.json"))
            run.global_models[t] = model
    with open(run.path("gain_importance.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["target", "feature", "gain"])
        for t, model in run.global_models.items():
            for f, g in gain_importance(model).items():
                wr.writerow([t, f, repr(float(g))])


def _config_label(cfg: FitConfig, grid: dict) -> str:
    return ";".join(f"{k}={getattr(cfg, k)}" for k in sorted(grid))


def _stage_gw_boost(run: _Run) -> None:
    cfg = run.cfg
    table = _model_table(run)
    X = table.matrix(run.features)
    coords = table.coords()
    n = len(table)
    rows = []
    for t in cfg.targets:
        local_cfg = FitConfig.from_mapping({**asdict(run.global_models[t].config),
                                            "seed": stage_seed(cfg.seed, f"local:{t}")})
        cands = [k for k in cfg.kernel_candidates if k < n]
        if not cands:
            raise ValueError(f"no kernel candidate below the {n} modelled zones: {list(cfg.kernel_candidates)}")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            trace = loo_bandwidth(X, table[t], coords, cands, local_cfg, table.zone_ids, cfg.n_jobs)
        out = run.path("gw_boost", _tag(t), "bandwidth.csv")
        trace.to_csv(out)
        lms = gw_fit(X, table[t], coords, trace.best, local_cfg, table.zone_ids, run.features,
                     oob=cfg.oob, n_jobs=cfg.n_jobs)
        lms.write_outputs(out.parent)
        run.local_sets[t] = lms
        oob = global_oob(lms)
        w = run.weights
        mi = residual_moran(lms, w, cfg.permutations, stage_seed(cfg.seed, f"resid:{t}"))
        glob_res = table[t] - run.global_models[t].predict(X)
        gm = global_moran(glob_res[table.row_index(w.ids)], w, cfg.permutations, stage_seed(cfg.seed, f"resid:{t}"))
        rows.append([t, trace.best, repr(oob.r2), repr(oob.mae), repr(oob.rmse),
                     repr(float(np.mean(lms.local_r2))), repr(mi.I), _fmt(mi.p_value), repr(gm.I), _fmt(gm.p_value)])
    with open(run.path("gw_boost", "diagnostics.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["target", "k", "oob_r2", "oob_mae", "oob_rmse", "mean_local_r2",
                     "residual_moran_I", "residual_moran_p", "global_residual_moran_I", "global_residual_moran_p"])
        wr.writerows(rows)


def _stage_shap(run: _Run) -> None:
    cfg = run.cfg
    table = _model_table(run)
    signed = cfg.signed_feature if cfg.signed_feature in run.features else None
    dep = [f for f in cfg.explain_features if f in run.features]
    for t in cfg.targets:
        sm = tree_shap(run.global_models[t], table)
        run.shap[t] = sm
        write_outputs(sm, run.path("shap", _tag(t)), dep, None, table.zone_ids)
        recs = local_importance_maps(run.local_sets[t], table, signed)
        write_local_primary(recs, run.path("shap", _tag(t), "local_primary.csv"), signed)


def _stage_gam(run: _Run) -> None:
    cfg = run.cfg
    rows = []
    missing = [f for f in cfg.explain_features if f not in run.features]
    if missing:
        raise ValueError(f"explain feature(s) not among the model features: {missing}")
    for t in cfg.targets:
        sm = run.shap[t]
        for f in cfg.explain_features:
            j = sm.feature_names.index(f)
            x = sm.X[:, j]
            if np.unique(x).size < 4:
                continue
            g = gam_fit(x, sm.values[:, j], n_knots=cfg.gam_knots)
            rows.append((t, f, transition_point(g), g))
    write_transition_points(rows, run.path("transition_points.csv"))


_STAGE_FUNCS: dict[str, Callable[[_Run], None]] = {
    "features": _stage_features,
    "svf": _stage_svf,
    "utci": _stage_utci,
    "zonal": _stage_zonal,
    "moran": _stage_moran,
    "gwr": _stage_gwr,
    "global_model": _stage_global_model,
    "gw_boost": _stage_gw_boost,
    "shap": _stage_shap,
    "gam": _stage_gam,
}


# --------------------------------------------------------------------------- driver


def _finalize(work: Path, out: Path, suffix: str) -> dict[str, str]:
    hashes = {}
    for src in sorted(p for p in work.rglob("*") if p.is_file()):
        rel = src.relative_to(work).as_posix()
        dst = out / (rel + suffix)
        dst.parent.mkdir(parents=True, exist_ok=True)
        hashes[rel] = sha256_file(src)
        shutil.move(str(src), dst)
    shutil.rmtree(work, ignore_errors=True)
    return hashes


def run_hash(manifest: dict) -> str:
    """Digest of seed, input hashes and output hashes; independent of paths and library versions."""
    payload = json.dumps({"seed": manifest["seed"], "inputs": manifest["inputs"], "outputs": manifest["outputs"]},
                         sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def run_pipeline(cfg: PipelineConfig, progress: Callable[[str], None] | None = None) -> RunResult:
    """Run every stage in order and write the outputs plus ``manifest.json``."""
    cfg.check_inputs()
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    work = out.parent / f".{out.name}.work"
    if work.exists():
        shutil.rmtree(work)
    work.mkdir(parents=True)
    inputs = {name: {"file": p.name, "sha256": sha256_file(p)} for name, p in cfg.inputs.items()}
    if cfg.inputs.bands:
        spec = json.loads(cfg.inputs.bands.read_text())
        for band, rel in sorted(spec.items()):
            p = cfg.inputs.bands.parent / rel
            if p.is_file():
                inputs[f"band_{band}"] = {"file": p.name, "sha256": sha256_file(p)}
    manifest: dict[str, Any] = {"seed": cfg.seed, "config": cfg.echo(), "inputs": inputs,
                                "stages": list(STAGES), "versions": _versions()}
    run = _Run(cfg, work)
    for stage in STAGES:
        if progress:
            progress(stage)
        try:
            _STAGE_FUNCS[stage](run)
        except Exception as e:
            manifest["failed_stage"] = stage
            manifest["error"] = f"{type(e).__name__}: {e}"
            manifest["outputs"] = _finalize(work, out, ".partial")
            (out / "manifest.json.partial").write_text(json.dumps(manifest, indent=2, sort_keys=True))
            raise StageError(stage, e) from e
    manifest["notes"] = run.notes
    manifest["outputs"] = _finalize(work, out, "")
    manifest["run_hash"] = run_hash(manifest)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return RunResult(out, manifest, run.table)
