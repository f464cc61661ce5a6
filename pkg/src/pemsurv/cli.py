"""Command line interface: ``pemsurv <command> ...`` (or ``python -m pemsurv``)."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from .baselines import KaplanMeierModel, glm_fit
from .bench import BenchConfig, ScalingConfig, _load_toml, run_benchmark, run_checks, run_scaling, scaling_checks, write_results
from .boost import BoostParams, fit, load_model
from .metrics import evaluate
from .ped import make_cutpoints, parse_cut_spec, read_ped_csv, transform, write_ped_csv
from .predict import beyond_followup, predict_cif, predict_survival
from .survdata import CATEGORICAL, CsvSchema, DataValidationError, FeatureSchema, SchemaError, load_csv, write_csv
from .synth import SynthConfig, generate

log = logging.getLogger("pemsurv")


def _add_schema_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("input columns")
    g.add_argument("--schema", help="TOML or JSON file with the column layout")
    g.add_argument("--col-id")
    g.add_argument("--col-time")
    g.add_argument("--col-entry")
    g.add_argument("--col-tstart")
    g.add_argument("--col-tstop")
    g.add_argument("--col-status")
    g.add_argument("--col-cause")
    g.add_argument("--features", help="comma-separated feature columns (default: all remaining columns)")
    g.add_argument("--categorical", help="comma-separated categorical feature columns")
    g.add_argument("--n-causes", type=int)


def _split(s):
    return [x.strip() for x in s.split(",") if x.strip()] if s else []


def _read_mapping(path) -> dict:
    if str(path).endswith(".json"):
        return json.loads(Path(path).read_text())
    d = _load_toml(path)
    return d.get("schema", d)


def csv_schema(args, path) -> CsvSchema:
    """Column layout from ``--schema``, the ``--col-*`` flags and the file header."""
    d = _read_mapping(args.schema) if args.schema else {}
    header = list(pd.read_csv(path, nrows=0, sep=d.get("delimiter", ",")).columns)
    flags = {
        "id": args.col_id, "time": args.col_time, "entry": args.col_entry, "tstart": args.col_tstart,
        "tstop": args.col_tstop, "status": args.col_status, "cause": args.col_cause, "n_causes": args.n_causes,
    }
    d.update({k: v for k, v in flags.items() if v is not None})
    if not args.schema:
        if "tstart" not in d and "tstart" in header and "tstop" in header:
            d.setdefault("tstart", "tstart")
            d.setdefault("tstop", "tstop")
            d["time"] = None
        if "cause" not in d and "cause" in header:
            d["cause"] = "cause"
        if "state" in header:
            d.setdefault("state", "state")
    if args.features:
        d["features"] = _split(args.features)
    if args.categorical:
        d["categorical"] = _split(args.categorical)
    schema = CsvSchema.from_dict(d)
    if not schema.features:
        used = {schema.id, schema.time, schema.entry, schema.tstart, schema.tstop, schema.status, schema.cause, schema.state}
        schema.features = [c for c in header if c not in used]
    return schema


def _model_features(model) -> FeatureSchema:
    return model.user_schema if hasattr(model, "user_schema") else model.feature_schema


def read_features(path, fs: FeatureSchema, id_col="id"):
    """Feature rows for prediction, encoded with the model's frozen schema."""
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [n for n in fs.names if n not in df.columns]
    if missing:
        raise SchemaError(f"missing feature columns {missing}")
    ids = df[id_col].to_numpy() if id_col in df.columns else np.arange(1, len(df) + 1).astype(str)
    X = np.empty((len(df), len(fs)))
    for i, (name, kind) in enumerate(zip(fs.names, fs.kinds)):
        col = df[name].str.strip()
        if kind == CATEGORICAL:
            X[:, i] = fs.encode(name, col)
        else:
            X[:, i] = np.array([float(v) for v in col])
    return ids, X


def _boost_params(path, overrides: dict) -> BoostParams:
    d = {}
    if path:
        d = _load_toml(path)
        d = d.get("params", d)
    d.update(overrides)
    return BoostParams.from_dict(d)


def cmd_simulate(args):
    res = generate(SynthConfig(n=args.n, scenario=args.scenario, seed=args.seed, censoring=args.censoring))
    write_csv(res.dataset, args.out)
    log.info("wrote %d subjects (censored %.1f%%) to %s", args.n, 100 * res.censored_fraction, args.out)
    if args.truth:
        times = np.linspace(0.0, 10.0, 21)[1:]
        X = res.dataset.X
        rows = {"id": np.repeat(res.dataset.subject_id, len(times)), "t": np.tile(times, len(X))}
        rows["surv"] = res.truth.survival(X, times).ravel()
        if res.dataset.n_causes > 1:
            cif = res.truth.cif(X, times)
            for k in range(len(cif)):
                rows[f"cif{k + 1}"] = cif[k].ravel()
        pd.DataFrame(rows).to_csv(args.truth, index=False)


def cmd_transform(args):
    ds = load_csv(args.input, csv_schema(args, args.input))
    strategy, n_sub = parse_cut_spec(args.cuts)
    cp = make_cutpoints(ds, strategy, n_sub=n_sub, seed=args.seed)
    ped = transform(ds, cp)
    write_ped_csv(ped, args.out)
    log.info("%d subjects -> %d PED rows over %d intervals", len(ds.subjects()), len(ped), cp.n_intervals)


def _is_ped(path) -> bool:
    header = set(pd.read_csv(path, nrows=0).columns)
    return {"j", "tj", "toff", "label", "k"} <= header


def cmd_fit(args):
    """Fit from a survival CSV, or (gbt/glm) directly from a PED CSV written by ``transform``."""
    if _is_ped(args.train):
        if args.engine == "km":
            raise ValueError("the km engine needs subject-level data, not a PED table")
        ped = read_ped_csv(args.train)
        cp = ped.cutpoints
        train_fs = ped.feature_schema
    else:
        train = load_csv(args.train, csv_schema(args, args.train))
        train_fs = train.feature_schema
        if args.engine == "km":
            KaplanMeierModel.fit(train).save(args.out)
            log.info("saved km model to %s", args.out)
            return
        strategy, n_sub = parse_cut_spec(args.cuts)
        cp = make_cutpoints(train, strategy, n_sub=n_sub, seed=args.seed)
        ped = transform(train, cp)
    if args.engine == "glm":
        model = glm_fit(ped, ridge=args.ridge)
        if args.coef:
            model.coef_table().to_csv(args.coef, index=False)
    else:
        params = _boost_params(args.params, {"rng_seed": args.seed} if args.seed is not None else {})
        valid = None
        if args.valid:
            if _is_ped(args.valid):
                valid = read_ped_csv(args.valid)
            else:
                vds = load_csv(args.valid, csv_schema(args, args.valid), feature_schema=train_fs)
                valid = transform(vds, cp, beyond="censor")
        model = fit(ped, params, valid=valid)
        if valid is not None and params.early_stopping_rounds is not None:
            log.info("best iteration %d", model.best_iteration)
    model.save(args.out)
    log.info("saved %s model to %s", args.engine, args.out)


def cmd_predict(args):
    model = load_model(args.model)
    ids, X = read_features(args.input, _model_features(model), args.col_id or "id")
    times = np.asarray([float(t) for t in _split(args.times)])
    surv = predict_survival(model, X, times)
    flag = beyond_followup(model, times)
    out = pd.DataFrame({"id": np.repeat(ids, len(times)), "t": np.tile(times, len(ids)), "surv": surv.ravel()})
    if model.n_causes > 1:
        cif = predict_cif(model, X, times)
        for k in range(model.n_causes):
            out[f"cif{k + 1}"] = cif[k].ravel()
    out["extrapolated"] = np.tile(flag, len(ids))
    out.to_csv(args.out, index=False)
    if flag.any():
        log.warning("times beyond the last cut-point use the last interval's hazard: %s", times[flag].tolist())


def cmd_evaluate(args):
    model = load_model(args.model)
    fs = _model_features(model)
    train = load_csv(args.train, csv_schema(args, args.train), feature_schema=fs if len(fs) else None)
    test = load_csv(args.test, csv_schema(args, args.test), feature_schema=train.feature_schema)
    report = evaluate(model, train, test)
    Path(args.out).write_text(json.dumps(report.to_dict(percent=True), indent=2))
    for r in report.to_dict()["metrics"]:
        c = "nan" if r["cindex"] is None else f"{r['cindex']:.2f}"
        print(f"cause {r['cause']} {r['horizon']} (t={r['tau']:.4g}): ibs {r['ibs']:.2f}  brier {r['brier']:.2f}  cindex {c}")


def _report_checks(checks) -> int:
    failed = 0
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failed += not ok
    return 1 if failed else 0


def cmd_bench(args):
    cfg = BenchConfig.from_toml(args.config)
    result = run_benchmark(cfg)
    out = write_results(result, args.out)
    print(result.summary().to_string(index=False))
    log.info("results written to %s", out)
    return _report_checks(run_checks(result, cfg)) if args.check else 0


def cmd_scaling(args):
    cfg = ScalingConfig.from_toml(args.config)
    cells, summary = run_scaling(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cells.to_csv(out / "scaling_cells.csv", index=False)
    summary.to_csv(out / "scaling_summary.csv", index=False)
    print(summary.to_string(index=False))
    return _report_checks(scaling_checks(summary, cfg)) if args.check else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pemsurv", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a synthetic dataset")
    p.add_argument("--scenario", choices=["tve", "tve_cr"], default="tve")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--censoring", type=float)
    p.add_argument("--out", required=True)
    p.add_argument("--truth", help="also write true S(t) (and CIFs) on a time grid")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("transform", help="write the PED table of a dataset")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--cuts", default="all", help="all | sub:N | file of cut-points")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_schema_args(p)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("fit", help="fit a model and save it as JSON")
    p.add_argument("--engine", choices=["gbt", "glm", "km"], default="gbt")
    p.add_argument("--train", required=True)
    p.add_argument("--valid")
    p.add_argument("--params", help="TOML with boosting parameters")
    p.add_argument("--cuts", default="all")
    p.add_argument("--seed", type=int)
    p.add_argument("--ridge", type=float, default=0.0)
    p.add_argument("--coef", help="GLM only: write the coefficient table as CSV")
    p.add_argument("--out", required=True)
    _add_schema_args(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="survival (and incidence) per subject and time")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--times", required=True, help="comma-separated times")
    p.add_argument("--col-id")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="Brier, IBS and C-index at the test quartiles")
    p.add_argument("--model", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    _add_schema_args(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="run the tuning and evaluation benchmark")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="results")
    p.add_argument("--check", action="store_true", help="exit non-zero if a configured check fails")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("scaling", help="fit time and IBS versus sample size")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="results")
    p.add_argument("--check", action="store_true")
    p.set_defaults(func=cmd_scaling)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args) or 0
    except (SchemaError, DataValidationError, ValueError, FileNotFoundError) as exc:
        row = getattr(exc, "row", None)
        where = f" (row {row})" if row is not None else ""
        print(f"error{where}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
