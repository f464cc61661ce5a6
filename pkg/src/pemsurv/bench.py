"""Benchmark harness: train/test splits, random-search tuning, scaling runs.

Every replication derives its seeds from ``(cfg.seed, replication)``, and
the manifest written next to the results stores the config, those seeds and
a hash of the data, so ``rerun_manifest`` reproduces the metric values.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import pandas as pd

from . import __version__
from .baselines import KaplanMeierModel, glm_fit
from .boost import BoostParams, fit
from .metrics import QUANTILE_LABELS, evaluate
from .ped import make_cutpoints, parse_cut_spec, transform
from .survdata import CsvSchema, SurvivalDataset, load_csv
from .synth import SynthConfig, generate

log = logging.getLogger(__name__)

ENGINES = ("km", "glm", "gbt")
METRICS = ("ibs", "brier", "cindex")
RESULT_COLUMNS = ["replication", "engine", "cause", "horizon", "tau", *METRICS]


def _load_toml(path) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _from_mapping(cls, d: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class SearchSpace:
    """Ranges of the uniform random search over boosting parameters."""

    max_depth: tuple[int, int] = (1, 20)
    min_loss_reduction: tuple[float, float] = (0.0, 5.0)
    min_child_weight: tuple[int, int] = (5, 50)
    row_subsample: tuple[float, float] = (0.5, 1.0)
    col_subsample: tuple[float, float] = (0.5, 1.0)
    l2_lambda: tuple[float, float] = (1.0, 3.0)

    def __post_init__(self):
        for f in fields(self):
            lo, hi = getattr(self, f.name)
            if lo > hi:
                raise ValueError(f"search range for {f.name} is empty: [{lo}, {hi}]")
        for end in (0, 1):
            BoostParams(**{f.name: getattr(self, f.name)[end] for f in fields(self)})

    def sample(self, rng: np.random.Generator) -> dict:
        out = {
            "max_depth": int(rng.integers(self.max_depth[0], self.max_depth[1] + 1)),
            "min_loss_reduction": float(rng.uniform(*self.min_loss_reduction)),
            "min_child_weight": float(rng.integers(self.min_child_weight[0], self.min_child_weight[1] + 1)),
            "row_subsample": float(rng.uniform(*self.row_subsample)),
            "col_subsample": float(rng.uniform(*self.col_subsample)),
            "l2_lambda": float(rng.uniform(*self.l2_lambda)),
        }
        BoostParams(**out)
        return out


@dataclass(frozen=True)
class BenchConfig:
    """Benchmark protocol.

    Data come from ``data`` (a CSV read with ``csv_schema``) or, when unset,
    from the synthetic ``scenario`` with ``n`` subjects per replication.
    ``cuts`` is ``"all"`` or ``"sub:N"``. Metrics in the result table are on
    the percent scale.
    """

    scenario: str = "tve"
    n: int = 1000
    data: Optional[str] = None
    csv_schema: Optional[dict] = None
    split: float = 0.7
    n_search: int = 20
    cv_folds: int = 4
    replications: int = 10
    seed: int = 0
    engines: tuple[str, ...] = ENGINES
    learning_rate: float = 0.05
    n_rounds: int = 1000
    early_stopping_rounds: int = 50
    tree_method: str = "exact"
    cuts: str = "all"
    glm_ridge: float = 1e-4
    search_space: SearchSpace = field(default_factory=SearchSpace)
    checks: tuple[str, ...] = ()
    min_wins: int = 8
    save_models: bool = False

    def __post_init__(self):
        if not 0 < self.split < 1:
            raise ValueError("split fraction must lie in (0, 1)")
        if self.cv_folds < 2:
            raise ValueError("cv_folds must be at least 2")
        if self.n_search < 1:
            raise ValueError("n_search must be at least 1")
        if self.replications < 0:
            raise ValueError("replications must be non-negative")
        bad = set(self.engines) - set(ENGINES)
        if bad:
            raise ValueError(f"unknown engines {sorted(bad)}")
        bad = set(self.checks) - set(CHECKS)
        if bad:
            raise ValueError(f"unknown checks {sorted(bad)}")
        if isinstance(self.search_space, dict):
            object.__setattr__(self, "search_space", _from_mapping(SearchSpace, self.search_space))
        parse_cut_spec(self.cuts)
        BoostParams(learning_rate=self.learning_rate, n_rounds=self.n_rounds, tree_method=self.tree_method)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["search_space"] = {k: list(v) for k, v in d["search_space"].items()}
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        return _from_mapping(cls, dict(d))

    @classmethod
    def from_toml(cls, path) -> "BenchConfig":
        return cls.from_dict(_load_toml(path).get("bench", {}))


@dataclass
class BenchResult:
    table: pd.DataFrame
    manifest: dict
    models: dict = field(default_factory=dict)

    def summary(self) -> pd.DataFrame:
        if self.table.empty:
            return pd.DataFrame(columns=["engine", "cause", "horizon", *METRICS])
        return self.table.groupby(["engine", "cause", "horizon"], sort=False)[list(METRICS)].mean().reset_index()


def dataset_hash(ds: SurvivalDataset) -> str:
    h = hashlib.sha256()
    for a in (ds.t_start, ds.t_end, ds.status, ds.cause, ds.state, ds.X):
        h.update(np.ascontiguousarray(a).tobytes())
    h.update("\x00".join(ds.subject_id).encode())
    h.update(json.dumps(ds.feature_schema.to_dict(), sort_keys=True).encode())
    return h.hexdigest()


def _table_hash(table: pd.DataFrame) -> str:
    return hashlib.sha256(table.to_csv(index=False, float_format="%.17g").encode()).hexdigest()


def replication_seeds(seed: int, r: int) -> dict:
    """Independent integer seeds for the data, the split, the search and the fits."""
    state = np.random.SeedSequence([seed, r]).generate_state(4, dtype=np.uint32)
    return dict(zip(("data", "split", "search", "fit"), (int(s) for s in state)))


def _cutpoints(ds: SurvivalDataset, cuts: str, seed: int):
    strategy, n_sub = parse_cut_spec(cuts)
    return make_cutpoints(ds, strategy, n_sub=n_sub, seed=seed)


def _observe(observer, event, **info):
    if observer is not None:
        observer(event, info)


def split_subjects(ds: SurvivalDataset, frac: float, seed: int):
    ids = np.random.default_rng(seed).permutation(ds.subjects())
    n_train = int(round(frac * len(ids)))
    if n_train == 0 or n_train == len(ids):
        raise ValueError("split leaves an empty training or test set")
    return ds.take_subjects(ids[:n_train]), ds.take_subjects(ids[n_train:])


def tune_gbt(train: SurvivalDataset, cfg: BenchConfig, seed: int, fit_seed: int, observer=None):
    """Random search scored by mean validation deviance over subject-level folds.

    Returns the best parameter draw (first best on ties), the number of
    rounds for the refit (mean best iteration + 1 over folds) and the
    per-candidate scores.
    """
    rng = np.random.default_rng(seed)
    ids = rng.permutation(train.subjects())
    folds = np.array_split(ids, cfg.cv_folds)
    peds = []
    for f, held in enumerate(folds):
        inner_ids = np.concatenate([folds[g] for g in range(cfg.cv_folds) if g != f])
        inner, outer = train.take_subjects(inner_ids), train.take_subjects(held)
        _observe(observer, "cutpoints", stage=f"fold{f}", subjects=list(inner_ids))
        cp = _cutpoints(inner, cfg.cuts, fit_seed)
        peds.append((transform(inner, cp), transform(outer, cp, beyond="censor")))
    base = BoostParams(
        learning_rate=cfg.learning_rate,
        n_rounds=cfg.n_rounds,
        early_stopping_rounds=cfg.early_stopping_rounds,
        tree_method=cfg.tree_method,
        rng_seed=fit_seed,
    )
    candidates = []
    best = None
    for c in range(cfg.n_search):
        draw = cfg.search_space.sample(rng)
        params = base.replace(**draw)
        devs, iters = [], []
        for ped_in, ped_va in peds:
            model = fit(ped_in, params, valid=ped_va)
            devs.append(model.history["valid_deviance"][model.best_iteration])
            iters.append(model.best_iteration + 1)
        score = float(np.mean(devs))
        candidates.append({"params": draw, "score": score, "rounds": iters})
        log.debug("candidate %d: %s -> %.6f", c, draw, score)
        if best is None or score < candidates[best]["score"]:
            best = c
    chosen = candidates[best]
    rounds = max(1, int(round(np.mean(chosen["rounds"]))))
    return base.replace(early_stopping_rounds=None, n_rounds=rounds, **chosen["params"]), candidates


def _load_source(cfg: BenchConfig, data_seed: int) -> SurvivalDataset:
    if cfg.data is not None:
        return load_csv(cfg.data, CsvSchema.from_dict(cfg.csv_schema or {}))
    return generate(SynthConfig(n=cfg.n, scenario=cfg.scenario, seed=data_seed)).dataset


def _fit_engine(engine, train, cfg, seeds, observer, rep_info):
    if engine == "km":
        return KaplanMeierModel.fit(train)
    _observe(observer, "cutpoints", stage="refit", subjects=list(train.subjects()))
    cp = _cutpoints(train, cfg.cuts, seeds["fit"])
    ped = transform(train, cp)
    if engine == "glm":
        return glm_fit(ped, ridge=cfg.glm_ridge)
    params, candidates = tune_gbt(train, cfg, seeds["search"], seeds["fit"], observer)
    rep_info["gbt_params"] = params.to_dict()
    rep_info["gbt_search"] = candidates
    return fit(ped, params)


def run_benchmark(cfg: BenchConfig, observer: Optional[Callable] = None) -> BenchResult:
    """Run all replications; a failing engine leaves missing cells and the run continues.

    ``observer(event, info)`` is called with the subjects used to place
    cut-points (``"cutpoints"``) and to estimate censoring weights
    (``"censoring"``), so callers can check that held-out data never leak in.
    """
    rows = []
    reps = []
    models = {}
    for r in range(cfg.replications):
        seeds = replication_seeds(cfg.seed, r)
        ds = _load_source(cfg, seeds["data"])
        train, test = split_subjects(ds, cfg.split, seeds["split"])
        info = {"replication": r, "seeds": seeds, "data_hash": dataset_hash(ds), "failures": {}}
        for engine in cfg.engines:
            t0 = time.perf_counter()
            try:
                model = _fit_engine(engine, train, cfg, seeds, observer, info)
                _observe(observer, "censoring", stage=engine, subjects=list(train.subjects()))
                report = evaluate(model, train, test)
            except Exception as exc:  # recorded as a missing cell
                log.warning("replication %d, engine %s failed: %s", r, engine, exc)
                info["failures"][engine] = f"{type(exc).__name__}: {exc}"
                for k in range(1, ds.n_causes + 1):
                    for h in QUANTILE_LABELS:
                        rows.append({"replication": r, "engine": engine, "cause": k, "horizon": h,
                                     "tau": np.nan, **{m: np.nan for m in METRICS}})
                continue
            info.setdefault("fit_seconds", {})[engine] = time.perf_counter() - t0
            if cfg.save_models:
                models[(r, engine)] = model
            for row in report.to_dict(percent=True)["metrics"]:
                rows.append({"replication": r, "engine": engine, "cause": row["cause"], "horizon": row["horizon"],
                             "tau": row["tau"], **{m: np.nan if row[m] is None else row[m] for m in METRICS}})
        reps.append(info)
        log.info("replication %d done", r)
    table = pd.DataFrame(rows, columns=RESULT_COLUMNS)
    manifest = {
        "format": "pemsurv-bench",
        "version": __version__,
        "config": cfg.to_dict(),
        "replications": reps,
        "results_sha256": _table_hash(table),
    }
    return BenchResult(table, manifest, models)


def write_results(result: BenchResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.table.to_csv(out / "results.csv", index=False, float_format="%.17g")
    result.summary().to_csv(out / "summary.csv", index=False)
    (out / "manifest.json").write_text(json.dumps(result.manifest, indent=2, default=float))
    for (r, engine), model in result.models.items():
        model.save(out / f"model_rep{r}_{engine}.json")
    return out


def rerun_manifest(manifest: dict | str | Path) -> BenchResult:
    """Re-execute a persisted run and check the data hashes still match."""
    if not isinstance(manifest, dict):
        manifest = json.loads(Path(manifest).read_text())
    cfg = BenchConfig.from_dict(manifest["config"])
    result = run_benchmark(cfg)
    for old, new in zip(manifest["replications"], result.manifest["replications"]):
        if old["data_hash"] != new["data_hash"]:
            raise ValueError(f"replication {old['replication']}: input data changed since the manifest was written")
    return result


def same_results(a: pd.DataFrame, b: pd.DataFrame) -> bool:
    """Bit-exact equality of two result tables (NaN cells compare equal)."""
    if list(a.columns) != list(b.columns) or len(a) != len(b):
        return False
    for col in a.columns:
        x, y = a[col].to_numpy(), b[col].to_numpy()
        if x.dtype.kind == "f":
            if not np.array_equal(x, y, equal_nan=True):
                return False
        elif not np.array_equal(x, y):
            return False
    return True


def _ibs_means(table: pd.DataFrame, horizon: str) -> dict:
    sub = table[(table.horizon == horizon) & (table.cause == 1)]
    return sub.groupby("engine")["ibs"].mean().to_dict()


def _check_ibs_order(table, cfg):
    out = []
    for h in ("Q50", "Q75"):
        m = _ibs_means(table, h)
        ok = all(e in m for e in ENGINES) and m["km"] > m["glm"] > m["gbt"]
        out.append((f"ibs_order_{h}", bool(ok), ", ".join(f"{e}={m.get(e, np.nan):.3f}" for e in ENGINES)))
    return out


def _check_gbt_wins(table, cfg):
    out = []
    for h in ("Q50", "Q75"):
        sub = table[(table.horizon == h) & (table.cause == 1)].pivot(index="replication", columns="engine", values="ibs")
        wins = int((sub["gbt"] < sub["glm"]).sum()) if {"gbt", "glm"} <= set(sub.columns) else 0
        out.append((f"gbt_beats_glm_{h}", wins >= cfg.min_wins, f"{wins}/{len(sub)} replications"))
    return out


CHECKS = {"ibs_order": _check_ibs_order, "gbt_wins": _check_gbt_wins}


def run_checks(result: BenchResult, cfg: BenchConfig) -> list[tuple[str, bool, str]]:
    out = []
    for name in cfg.checks:
        out.extend(CHECKS[name](result.table, cfg))
    return out


@dataclass(frozen=True)
class ScalingConfig:
    """Fit time and IBS as the sample size grows, for two cut-point strategies.

    Each cell fits the boosted model with fixed parameters (``params``) on a
    70% training split of a synthetic TVE sample of size n and reports the
    test IBS at the median event time. Timing covers cut-point placement,
    the PED transform and boosting.
    """

    sizes: tuple[int, ...] = (400, 800, 1600, 3200)
    strategies: tuple[str, ...] = ("full", "subsample")
    n_sub: int = 200
    replications: int = 10
    scenario: str = "tve"
    split: float = 0.7
    seed: int = 0
    horizon: str = "Q50"
    params: dict = field(default_factory=lambda: {
        "learning_rate": 0.05, "n_rounds": 150, "max_depth": 3, "min_child_weight": 10.0,
        "row_subsample": 0.8, "col_subsample": 0.8, "l2_lambda": 2.0,
    })
    max_ratio: float = 3.0
    max_ibs_gap: float = 0.5
    gap_from: int = 1600

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.sizes, self.sizes[1:])):
            raise ValueError("sizes must be strictly increasing")
        bad = set(self.strategies) - {"full", "subsample"}
        if bad:
            raise ValueError(f"unknown strategies {sorted(bad)}")
        if self.horizon not in QUANTILE_LABELS:
            raise ValueError(f"horizon must be one of {QUANTILE_LABELS}")
        BoostParams(**self.params)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ScalingConfig":
        return _from_mapping(cls, dict(d))

    @classmethod
    def from_toml(cls, path) -> "ScalingConfig":
        return cls.from_dict(_load_toml(path).get("scaling", {}))


def run_scaling(cfg: ScalingConfig) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Per-cell measurements and a summary with mean time, mean IBS and time ratios."""
    rows = []
    for n in cfg.sizes:
        for r in range(cfg.replications):
            seeds = replication_seeds(cfg.seed + n, r)
            ds = generate(SynthConfig(n=n, scenario=cfg.scenario, seed=seeds["data"])).dataset
            train, test = split_subjects(ds, cfg.split, seeds["split"])
            params = BoostParams(**cfg.params, rng_seed=seeds["fit"])
            for strategy in cfg.strategies:
                t0 = time.perf_counter()
                if strategy == "full":
                    cp = make_cutpoints(train, "all_events")
                else:
                    cp = make_cutpoints(train, "subsample", n_sub=cfg.n_sub, seed=seeds["fit"])
                model = fit(transform(train, cp), params)
                elapsed = time.perf_counter() - t0
                ibs = evaluate(model, train, test).value("ibs", cfg.horizon) * 100.0
                rows.append({"n": n, "strategy": strategy, "replication": r, "intervals": cp.n_intervals,
                             "fit_seconds": elapsed, "ibs": ibs})
            log.info("scaling n=%d replication %d done", n, r)
    cells = pd.DataFrame(rows, columns=["n", "strategy", "replication", "intervals", "fit_seconds", "ibs"])
    summary = cells.groupby(["strategy", "n"], sort=False)[["fit_seconds", "ibs", "intervals"]].mean().reset_index()
    summary["time_ratio"] = summary.groupby("strategy")["fit_seconds"].transform(lambda s: s / s.shift(1))
    return cells, summary


def scaling_checks(summary: pd.DataFrame, cfg: ScalingConfig) -> list[tuple[str, bool, str]]:
    out = []
    by = {s: g.set_index("n") for s, g in summary.groupby("strategy")}
    if "subsample" in by:
        ratios = by["subsample"]["time_ratio"].dropna()
        out.append(("subsample_time_ratio", bool((ratios < cfg.max_ratio).all()),
                    ", ".join(f"{v:.2f}" for v in ratios)))
    if {"full", "subsample"} <= set(by):
        last = cfg.sizes[-1]
        rf, rs = by["full"].loc[last, "time_ratio"], by["subsample"].loc[last, "time_ratio"]
        out.append(("full_ratio_exceeds_subsample", bool(rf > rs), f"full {rf:.2f} vs subsample {rs:.2f} at n={last}"))
        for n in cfg.sizes:
            if n >= cfg.gap_from:
                gap = abs(by["full"].loc[n, "ibs"] - by["subsample"].loc[n, "ibs"])
                out.append((f"ibs_gap_n{n}", bool(gap <= cfg.max_ibs_gap), f"|full - subsample| = {gap:.3f} pp"))
    return out
