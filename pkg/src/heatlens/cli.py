"""``heatlens`` command line.

Exit codes: 0 on success, 2 when the arguments, config or input files are
invalid, 1 when a computation fails.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .raster import RasterFormatError

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2


class ValidationError(ValueError):
    """Bad arguments or unreadable inputs, detected before any computation."""


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"input not found: {p}")
    return p


def _names(text: str) -> list[str]:
    out = [t.strip() for t in text.split(",") if t.strip()]
    if not out:
        raise ValidationError("empty feature list")
    return out


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in _names(text)]
    except ValueError:
        raise ValidationError(f"expected comma-separated integers, got {text!r}") from None


def _table(path: str):
    from .table import FeatureTable

    try:
        return FeatureTable.from_csv(_existing(path))
    except (KeyError, ValueError) as e:
        if isinstance(e, ValidationError):
            raise
        raise ValidationError(str(e)) from None


def _columns(table, names):
    missing = [n for n in names if n not in table]
    if missing:
        raise ValidationError(f"column(s) not in table: {missing}")


def _fit_config(args):
    from .boosting import FitConfig

    try:
        return FitConfig(n_estimators=args.n_estimators, learning_rate=args.learning_rate, max_depth=args.max_depth,
                         subsample=args.subsample, reg_lambda=args.reg_lambda, min_child_weight=args.min_child_weight,
                         seed=args.seed)
    except ValueError as e:
        raise ValidationError(str(e)) from None


def _add_fit_args(p):
    p.add_argument("--n-estimators", type=int, default=500)
    p.add_argument("--learning-rate", type=float, default=0.05)
    p.add_argument("--max-depth", type=int, default=2)
    p.add_argument("--subsample", type=float, default=0.8)
    p.add_argument("--reg-lambda", type=float, default=1.0)
    p.add_argument("--min-child-weight", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)


def _model_data(args):
    table = _table(args.table)
    feats = _names(args.features)
    _columns(table, feats + [args.target])
    ok = table.complete_rows(feats + [args.target])
    if not ok.all():
        print(f"dropping {int((~ok).sum())} zone(s) with missing values", file=sys.stderr)
        table = table.select(table.zone_ids[ok])
    return table, feats


# --------------------------------------------------------------------------- commands


def cmd_pipeline(args) -> None:
    from .pipeline import ConfigError, run_pipeline, validate_config

    try:
        cfg = validate_config(args.config)
    except ConfigError as e:
        raise ValidationError(str(e)) from None
    progress = None if args.quiet else (lambda s: print(f"[heatlens] {s}", file=sys.stderr, flush=True))
    res = run_pipeline(cfg, progress)
    print(f"outputs: {res.output_dir}")
    print(f"run_hash: {res.manifest['run_hash']}")


def cmd_synth(args) -> None:
    from .city import make_synthetic_city

    if args.size < 64:
        raise ValidationError(f"--size must be >= 64, got {args.size}")
    cfg = make_synthetic_city(args.seed, args.size).write(args.out)
    print(cfg)


def cmd_index(args) -> None:
    from .indices import BandStack, compute_index
    from .raster import write_grid

    bands = BandStack.from_json(_existing(args.bands))
    write_grid(compute_index(args.kind, bands), args.out)


def cmd_svf(args) -> None:
    from .morphology import SvfConfig, compute_svf
    from .raster import read_grid, write_grid

    try:
        cfg = SvfConfig(args.directions, args.search_radius, args.canopy_transmissivity)
    except ValueError as e:
        raise ValidationError(str(e)) from None
    dsm = read_grid(_existing(args.dsm))
    cdsm = read_grid(_existing(args.cdsm)) if args.cdsm else None
    write_grid(compute_svf(dsm, cdsm, cfg), args.out)


def cmd_utci(args) -> None:
    from .microclimate import Site, mean_utci_at_hour, read_meteo
    from .raster import read_grid, write_grid

    dsm = read_grid(_existing(args.dsm))
    cdsm = read_grid(_existing(args.cdsm)) if args.cdsm else None
    svf = read_grid(_existing(args.svf))
    albedo = read_grid(_existing(args.albedo))
    samples = read_meteo(_existing(args.meteo))
    site = Site(args.lat, args.lon, args.utc_offset)
    u = mean_utci_at_hour(dsm, cdsm, svf, albedo, samples, args.hour, site, args.month, tau=args.canopy_transmissivity)
    write_grid(u, args.out)


def cmd_zonal(args) -> None:
    from .raster import rasterize_zones, read_grid, read_zones
    from .zonal import write_mismatch_csv, zonal_table

    grids = {}
    for item in args.grid:
        name, sep, path = item.partition("=")
        if not sep or not name:
            raise ValidationError(f"--grid expects NAME=PATH, got {item!r}")
        grids[name] = read_grid(_existing(path))
    masks = [read_grid(_existing(m)) for m in args.mask]
    zones = read_zones(_existing(args.zones))
    template = next(iter(grids.values()))
    zr = rasterize_zones(zones, template)
    table = zonal_table(grids, zr, {n: masks for n in grids})
    table.to_csv(args.out)
    if args.mismatch:
        _columns(table, ["LST_mean", "UTCI_mean"])
        write_mismatch_csv(table, args.mismatch)


def _weights_for(args, table):
    from .raster import ZoneSet, read_zones
    from .spatial import build_weights

    zones = read_zones(_existing(args.zones))
    keep = set(int(z) for z in table.zone_ids)
    zs = ZoneSet(tuple(z for z in zones if z.zone_id in keep))
    return build_weights(zs, args.weights)


def _spatial_input(args):
    table = _table(args.table)
    _columns(table, [args.column])
    table = table.select(table.zone_ids[np.isfinite(table[args.column])])
    w = _weights_for(args, table)
    return table[args.column][table.row_index(w.ids)], w


def cmd_moran(args) -> None:
    from .spatial import global_moran

    x, w = _spatial_input(args)
    m = global_moran(x, w, args.permutations, args.seed)
    out = sys.stdout if not args.out else open(args.out, "w", newline="")
    wr = csv.writer(out)
    wr.writerow(["column", "I", "expected", "p_value", "permutations"])
    wr.writerow([args.column, repr(m.I), repr(m.expected), "" if not np.isfinite(m.p_value) else repr(m.p_value),
                 m.permutations])
    if args.out:
        out.close()


def cmd_lisa(args) -> None:
    from .spatial import lisa

    x, w = _spatial_input(args)
    lisa(x, w, args.permutations, args.seed, args.alpha, args.n_jobs).to_csv(args.out)


def cmd_gwr(args) -> None:
    from .gwr import KernelSpec, gwr_bandwidth_search, gwr_fit

    table, feats = _model_data(args)
    X, y, coords = table.matrix(feats), table[args.target], table.coords()
    if args.bandwidth is not None:
        try:
            kernel = KernelSpec(args.kernel, args.bandwidth)
        except ValueError as e:
            raise ValidationError(str(e)) from None
    else:
        kernel = gwr_bandwidth_search(X, y, coords, args.kernel).best
        print(f"bandwidth: {kernel.bandwidth}", file=sys.stderr)
    gwr_fit(X, y, coords, kernel, names=feats).to_csv(args.out, table.zone_ids)


def cmd_fit(args) -> None:
    from .boosting import fit, regression_metrics, save_model

    table, feats = _model_data(args)
    cfg = _fit_config(args)
    model = fit(table.matrix(feats), table[args.target], None, cfg, names=feats)
    save_model(model, args.out)
    m = regression_metrics(table[args.target], model.predict(table.matrix(feats)))
    print(f"train r2={m.r2!r} mae={m.mae!r} rmse={m.rmse!r}")


def cmd_gwfit(args) -> None:
    from .gwboost import global_oob, gw_fit, loo_bandwidth

    table, feats = _model_data(args)
    cfg = _fit_config(args)
    X, y, coords = table.matrix(feats), table[args.target], table.coords()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.k is not None:
        k = args.k
    else:
        trace = loo_bandwidth(X, y, coords, _ints(args.candidates), cfg, table.zone_ids, args.n_jobs)
        trace.to_csv(out / "bandwidth.csv")
        k = trace.best
    lms = gw_fit(X, y, coords, k, cfg, table.zone_ids, feats, oob=args.oob, n_jobs=args.n_jobs)
    lms.write_outputs(out)
    msg = f"k={k} mean_local_r2={float(np.mean(lms.local_r2))!r}"
    if cfg.subsample < 1:
        msg += f" oob_r2={global_oob(lms).r2!r}"
    print(msg)


def cmd_explain(args) -> None:
    from .boosting import load_model
    from .explain import gam_fit, transition_point, tree_shap, write_outputs, write_transition_points

    model = load_model(_existing(args.model))
    table = _table(args.table)
    _columns(table, model.feature_names)
    table = table.select(table.zone_ids[table.complete_rows(model.feature_names)])
    dep = _names(args.dependence) if args.dependence else []
    _columns(table, dep)
    shap = tree_shap(model, table)
    write_outputs(shap, args.out, dep, None, table.zone_ids)
    if args.transitions:
        rows = []
        for f in _names(args.transitions):
            if f not in model.feature_names:
                raise ValidationError(f"feature {f!r} is not in the model")
            j = shap.feature_names.index(f)
            g = gam_fit(shap.X[:, j], shap.values[:, j])
            rows.append((args.target or "target", f, transition_point(g), g))
        write_transition_points(rows, Path(args.out) / "transition_points.csv")


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="heatlens", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pipeline", help="run every stage from a TOML config")
    p.add_argument("--config", required=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("synth", help="write a seeded synthetic city and its run.toml")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=192)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("index", help="spectral index from a band stack")
    p.add_argument("--kind", required=True, choices=["NDVI", "NDBI", "WET", "ALBEDO"])
    p.add_argument("--bands", required=True, help="JSON mapping band name to grid file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("svf", help="sky view factor from a DSM")
    p.add_argument("--dsm", required=True)
    p.add_argument("--cdsm")
    p.add_argument("--directions", type=int, default=360)
    p.add_argument("--search-radius", type=float, default=150.0)
    p.add_argument("--canopy-transmissivity", type=float, default=0.03)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_svf)

    p = sub.add_parser("utci", help="mean UTCI at one local hour")
    p.add_argument("--dsm", required=True)
    p.add_argument("--cdsm")
    p.add_argument("--svf", required=True)
    p.add_argument("--albedo", required=True)
    p.add_argument("--meteo", required=True)
    p.add_argument("--hour", type=int, default=11)
    p.add_argument("--month", type=int)
    p.add_argument("--lat", type=float, default=1.3521)
    p.add_argument("--lon", type=float, default=103.8198)
    p.add_argument("--utc-offset", type=float, default=8.0)
    p.add_argument("--canopy-transmissivity", type=float, default=0.03)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_utci)

    p = sub.add_parser("zonal", help="per-zone means of grids")
    p.add_argument("--zones", required=True)
    p.add_argument("--grid", action="append", required=True, metavar="NAME=PATH")
    p.add_argument("--mask", action="append", default=[], help="{0,1} grid; 1-cells are dropped")
    p.add_argument("--out", required=True)
    p.add_argument("--mismatch", help="also write the LST/UTCI mismatch CSV (needs LST_mean and UTCI_mean grids)")
    p.set_defaults(func=cmd_zonal)

    for name, helptext in (("moran", "global Moran's I of one column"), ("lisa", "local Moran's I of one column")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--table", required=True)
        p.add_argument("--column", required=True)
        p.add_argument("--zones", required=True)
        p.add_argument("--weights", default="queen_nn_hybrid")
        p.add_argument("--permutations", type=int, default=999)
        p.add_argument("--seed", type=int, default=0)
        if name == "lisa":
            p.add_argument("--alpha", type=float, default=0.05)
            p.add_argument("--n-jobs", type=int, default=1)
            p.add_argument("--out", required=True)
            p.set_defaults(func=cmd_lisa)
        else:
            p.add_argument("--out")
            p.set_defaults(func=cmd_moran)

    p = sub.add_parser("gwr", help="geographically weighted regression")
    p.add_argument("--table", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--features", required=True, help="comma-separated")
    p.add_argument("--kernel", choices=["adaptive", "fixed"], default="adaptive")
    p.add_argument("--bandwidth", type=float, help="skip the AICc search")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gwr)

    p = sub.add_parser("fit", help="global boosted model")
    p.add_argument("--table", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--features", required=True)
    _add_fit_args(p)
    p.add_argument("--out", required=True, help="model JSON")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("gwfit", help="geographically weighted boosting")
    p.add_argument("--table", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--features", required=True)
    _add_fit_args(p)
    p.add_argument("--k", type=int, help="neighbour count; otherwise chosen by leave-one-out")
    p.add_argument("--candidates", default="30,50,70,94,120")
    p.add_argument("--oob", choices=["iteration", "holdout"], default="holdout")
    p.add_argument("--n-jobs", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gwfit)

    p = sub.add_parser("explain", help="SHAP summary, dependence and transition points for a model")
    p.add_argument("--model", required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--dependence", help="comma-separated features")
    p.add_argument("--transitions", help="comma-separated features")
    p.add_argument("--target", help="label for the transition rows")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_explain)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    try:
        args.func(args)
    except (ValidationError, RasterFormatError) as e:
        print(f"heatlens: error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:  # noqa: BLE001
        print(f"heatlens: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
