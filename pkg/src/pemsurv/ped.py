"""Cut-points and the piece-wise exponential data (PED) transformation.

Every subject-interval (and, with several causes/transitions, every
subject-interval-transition) becomes one row with

* ``label``: 1 iff the subject's transition ``k`` happens inside the interval,
* ``toff``: the time the subject spent at risk in the interval,
* ``tj``: the interval's right endpoint, used as a model feature.

A Poisson model for ``label`` with offset ``log(toff)`` then estimates the
piece-wise constant hazard.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd

from .survdata import CATEGORICAL, NUMERIC, FeatureSchema, SurvivalDataset

log = logging.getLogger(__name__)

TIME_FEATURE = "tj"
TRANSITION_FEATURE = "k"


class CoverageError(ValueError):
    """Follow-up extends beyond the last cut-point."""


@dataclass(frozen=True, eq=False)
class CutPoints:
    kappa: np.ndarray

    def __post_init__(self):
        k = np.array(self.kappa, dtype=np.float64)
        if k.ndim != 1 or len(k) < 2:
            raise ValueError("cut-points need kappa_0 = 0 and at least one positive point")
        if k[0] != 0.0:
            raise ValueError(f"first cut-point must be 0, got {k[0]}")
        if not np.all(np.isfinite(k)) or np.any(np.diff(k) <= 0):
            raise ValueError("cut-points must be finite and strictly increasing")
        k.setflags(write=False)
        object.__setattr__(self, "kappa", k)

    def __eq__(self, other):
        return isinstance(other, CutPoints) and np.array_equal(self.kappa, other.kappa)

    def __len__(self) -> int:
        return len(self.kappa)

    @property
    def n_intervals(self) -> int:
        return len(self.kappa) - 1

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.kappa)

    @property
    def max_time(self) -> float:
        return float(self.kappa[-1])

    def interval_of(self, t) -> np.ndarray:
        """1-based index j with t in (kappa_{j-1}, kappa_j]; 0 for t <= 0."""
        return np.searchsorted(self.kappa, np.asarray(t, dtype=np.float64), side="left")

    def tolist(self) -> list[float]:
        return [float(x) for x in self.kappa]


def make_cutpoints(
    ds: SurvivalDataset,
    strategy: str | Sequence[float] = "all_events",
    *,
    n_sub: Optional[int] = None,
    seed: Optional[int] = None,
) -> CutPoints:
    """Place cut-points.

    ``"all_events"`` uses every unique event time (any cause) and appends
    the maximum follow-up time when it exceeds the last event.
    ``"subsample"`` does the same with the event times of ``n_sub`` subjects
    drawn without replacement, while the maximum follow-up still comes from
    all of ``ds``. A sequence is taken as explicit positive cut-points.
    """
    if not isinstance(strategy, str):
        pts = np.asarray(list(strategy), dtype=np.float64)
        if len(pts) == 0 or np.any(pts <= 0) or np.any(np.diff(pts) <= 0):
            raise ValueError("explicit cut-points must be positive and strictly increasing")
        return CutPoints(np.r_[0.0, pts])

    if len(ds) == 0:
        raise ValueError("cannot place data-driven cut-points on an empty dataset")
    if strategy == "all_events":
        events = ds.t_end[ds.status == 1]
    elif strategy == "subsample":
        if n_sub is None or n_sub <= 0:
            raise ValueError(f"subsample size must be positive, got {n_sub}")
        subjects = ds.subjects()
        rng = np.random.default_rng(seed)
        if n_sub < len(subjects):
            chosen = set(rng.choice(subjects, size=n_sub, replace=False))
        else:
            chosen = set(subjects)
        mask = np.fromiter((s in chosen for s in ds.subject_id), dtype=bool, count=len(ds))
        events = ds.t_end[(ds.status == 1) & mask]
    else:
        raise ValueError(f"unknown cut-point strategy {strategy!r}")

    if len(events) == 0:
        raise ValueError("no event times to place cut-points")
    kappa = np.unique(events)
    followup = float(ds.t_end.max())
    if followup > kappa[-1]:
        kappa = np.r_[kappa, followup]
    return CutPoints(np.r_[0.0, kappa])


def parse_cut_spec(spec: str) -> tuple[str | list[float], Optional[int]]:
    """Parse the CLI form ``all``, ``sub:N`` or a path to a file of cut-points."""
    if spec == "all":
        return "all_events", None
    if spec.startswith("sub:"):
        return "subsample", int(spec[4:])
    text = Path(spec).read_text().replace(",", " ").split()
    pts = [float(x) for x in text]
    if pts and pts[0] == 0.0:
        pts = pts[1:]
    return pts, None


class PedRow(NamedTuple):
    subject_id: str
    j: int
    tj: float
    toff: float
    label: int
    k: int
    features: tuple


@dataclass(frozen=True, eq=False)
class PedDataset:
    """Columnar PED; row order is (k, subject, j).

    ``X`` holds the original features only; :meth:`design_matrix` appends the
    interval time ``tj`` and the transition ``k`` as model features.
    """

    subject_id: np.ndarray
    interval: np.ndarray
    tj: np.ndarray
    toff: np.ndarray
    label: np.ndarray
    transition: np.ndarray
    X: np.ndarray
    cutpoints: CutPoints
    feature_schema: FeatureSchema
    n_causes: int = 1
    transition_labels: Optional[tuple[tuple[int, int], ...]] = None
    aggregated: tuple = field(default=())

    def __len__(self) -> int:
        return len(self.label)

    @property
    def offset(self) -> np.ndarray:
        return np.log(self.toff)

    @property
    def model_schema(self) -> FeatureSchema:
        return model_schema(self.feature_schema)

    def design_matrix(self) -> np.ndarray:
        return np.column_stack([self.X, self.tj, self.transition.astype(np.float64)])

    def rows(self) -> Iterator[PedRow]:
        for r in range(len(self)):
            yield PedRow(
                self.subject_id[r],
                int(self.interval[r]),
                float(self.tj[r]),
                float(self.toff[r]),
                int(self.label[r]),
                int(self.transition[r]),
                tuple(self.X[r]),
            )

    def select(self, mask: np.ndarray) -> "PedDataset":
        return PedDataset(
            self.subject_id[mask], self.interval[mask], self.tj[mask], self.toff[mask],
            self.label[mask], self.transition[mask], self.X[mask], self.cutpoints,
            self.feature_schema, self.n_causes, self.transition_labels,
        )

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(
            {
                "id": self.subject_id,
                "j": self.interval,
                "tj": self.tj,
                "toff": self.toff,
                "label": self.label,
                "k": self.transition,
            }
        )
        fs = self.feature_schema
        for i, (name, kind) in enumerate(zip(fs.names, fs.kinds)):
            df[name] = fs.decode(name, self.X[:, i]) if kind == CATEGORICAL else self.X[:, i]
        return df


def model_schema(fs: FeatureSchema) -> FeatureSchema:
    for name in (TIME_FEATURE, TRANSITION_FEATURE):
        if name in fs.names:
            raise ValueError(f"feature name {name!r} is reserved for the PED time/transition column")
    return fs.extend([TIME_FEATURE, TRANSITION_FEATURE], [NUMERIC, NUMERIC])


def transform(ds: SurvivalDataset, cp: CutPoints, beyond: str = "error") -> PedDataset:
    """Build the PED of ``ds`` on the intervals of ``cp``.

    Follow-up past the last cut-point raises :class:`CoverageError`; with
    ``beyond="censor"`` it is instead cut at the last cut-point and treated as
    censored there (used for held-out folds).

    When feature values change strictly inside an interval, the value in
    force at the start of the subject's time in that interval is carried
    over the whole interval and the (subject, j) pair is recorded in
    ``aggregated``.
    """
    kappa = cp.kappa
    K = ds.n_causes
    ds = ds.normalized()
    a, b = ds.t_start.copy(), ds.t_end.copy()
    status, cause = ds.status.copy(), ds.cause.copy()
    keep = np.ones(len(ds), dtype=bool)
    over = b > kappa[-1]
    if over.any():
        if beyond != "censor":
            r = int(np.flatnonzero(over)[0])
            raise CoverageError(
                f"subject {ds.subject_id[r]}: exit time {b[r]} beyond last cut-point {kappa[-1]}"
            )
        keep = a < kappa[-1]
        b = np.minimum(b, kappa[-1])
        status = np.where(over, 0, status)
        cause = np.where(over, 0, cause)
    rows = np.flatnonzero(keep)
    a, b, status, cause = a[rows], b[rows], status[rows], cause[rows]
    sid, state, X = ds.subject_id[rows], ds.state[rows], ds.X[rows]
    n_spans = len(rows)

    # occupancy = maximal run of spans of one subject in one state
    new_occ = np.ones(n_spans, dtype=bool)
    if n_spans > 1:
        new_occ[1:] = (sid[1:] != sid[:-1]) | (state[1:] != state[:-1]) | (status[:-1] == 1)
    occ = np.cumsum(new_occ) - 1

    j_first = np.searchsorted(kappa, a, side="right")
    j_last = np.searchsorted(kappa, b, side="left")
    counts = j_last - j_first + 1
    piece_span = np.repeat(np.arange(n_spans), counts)
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    piece_j = j_first[piece_span] + (np.arange(len(piece_span)) - starts)
    piece_toff = np.minimum(kappa[piece_j], b[piece_span]) - np.maximum(kappa[piece_j - 1], a[piece_span])

    piece_occ = occ[piece_span]
    new_grp = np.ones(len(piece_span), dtype=bool)
    if len(piece_span) > 1:
        new_grp[1:] = (piece_occ[1:] != piece_occ[:-1]) | (piece_j[1:] != piece_j[:-1])
    grp_start = np.flatnonzero(new_grp)
    grp_toff = np.add.reduceat(piece_toff, grp_start) if len(grp_start) else np.zeros(0)
    grp_last = np.r_[grp_start[1:], len(piece_span)] - 1
    first_span = piece_span[grp_start]
    last_span = piece_span[grp_last]
    grp_j = piece_j[grp_start]
    grp_occ = piece_occ[grp_start]
    grp_X = X[first_span]

    aggregated = []
    multi = np.flatnonzero(grp_last > grp_start)
    for g in multi:
        spans = piece_span[grp_start[g]:grp_last[g] + 1]
        if np.any(X[spans] != X[spans[0]]):
            aggregated.append((sid[first_span[g]], int(grp_j[g])))
    if aggregated:
        warnings.warn(
            f"{len(aggregated)} subject-intervals have feature changes inside an interval; "
            "carried forward the value at interval start",
            stacklevel=2,
        )

    terminal = np.r_[grp_occ[1:] != grp_occ[:-1], True] if len(grp_occ) else np.zeros(0, dtype=bool)
    grp_event = terminal & (status[last_span] == 1)
    grp_cause = np.where(grp_event, np.where(K == 1, 1, cause[last_span]), 0)
    grp_state = state[first_span]

    parts = []
    for k in range(1, K + 1):
        if ds.transition_labels is not None:
            at_risk = grp_state == ds.transition_labels[k - 1][0]
        else:
            at_risk = np.ones(len(grp_j), dtype=bool)
        idx = np.flatnonzero(at_risk)
        parts.append((k, idx))

    def cat(fn, dtype=None):
        arrays = [fn(k, idx) for k, idx in parts]
        if not arrays:
            return np.zeros(0, dtype=dtype)
        return np.concatenate(arrays) if dtype is None else np.concatenate(arrays).astype(dtype)

    p = X.shape[1]
    return PedDataset(
        subject_id=cat(lambda k, i: sid[first_span[i]]),
        interval=cat(lambda k, i: grp_j[i], np.int64),
        tj=cat(lambda k, i: kappa[grp_j[i]], np.float64),
        toff=cat(lambda k, i: grp_toff[i], np.float64),
        label=cat(lambda k, i: (grp_cause[i] == k).astype(np.int8), np.int8),
        transition=cat(lambda k, i: np.full(len(i), k), np.int64),
        X=np.concatenate([grp_X[i] for _, i in parts]) if parts else np.zeros((0, p)),
        cutpoints=cp,
        feature_schema=ds.feature_schema,
        n_causes=K,
        transition_labels=ds.transition_labels,
        aggregated=tuple(aggregated),
    )


def ped_loglik(ped: PedDataset, hazards) -> float:
    """Sum over rows of ``label * log(hazard) - hazard * toff``.

    This is the piece-wise exponential survival log-likelihood itself; the
    Poisson log-likelihood with offset differs from it by the constant
    ``sum(label * log(toff))``.
    """
    lam = np.asarray(hazards, dtype=np.float64)
    if lam.shape != ped.toff.shape:
        raise ValueError(f"hazards shape {lam.shape} does not match {len(ped)} PED rows")
    if np.any(~(lam > 0)):
        raise ValueError("hazards must be strictly positive")
    return float(np.sum(ped.label * np.log(lam) - lam * ped.toff))


def poisson_loglik(ped: PedDataset, hazards) -> float:
    """Poisson log-likelihood of the labels with mean ``hazard * toff`` (labels are 0/1)."""
    lam = np.asarray(hazards, dtype=np.float64)
    mu = lam * ped.toff
    return float(np.sum(ped.label * np.log(mu) - mu))


def _meta_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def write_ped_csv(ped: PedDataset, path: str | Path) -> None:
    """Write the PED table plus a ``<path>.meta.json`` sidecar with cut-points and schema."""
    ped.to_frame().to_csv(path, index=False, float_format="%.17g")
    meta = {
        "cutpoints": ped.cutpoints.tolist(),
        "feature_schema": ped.feature_schema.to_dict(),
        "n_causes": ped.n_causes,
        "transition_labels": [list(t) for t in ped.transition_labels] if ped.transition_labels else None,
    }
    _meta_path(path).write_text(json.dumps(meta, indent=2))


def read_ped_csv(path: str | Path) -> PedDataset:
    """Read a PED CSV. Without a sidecar, non-numeric feature columns become categorical."""
    df = pd.read_csv(path, dtype={"id": str}, float_precision="round_trip")
    for col in ("id", "j", "tj", "toff", "label", "k"):
        if col not in df.columns:
            raise ValueError(f"PED file {path} lacks column {col!r}")
    feats = [c for c in df.columns if c not in ("id", "j", "tj", "toff", "label", "k")]
    meta_file = _meta_path(path)
    if meta_file.exists():
        meta = json.loads(meta_file.read_text())
        fs = FeatureSchema.from_dict(meta["feature_schema"])
        cp = CutPoints(meta["cutpoints"])
        K = int(meta["n_causes"])
        trans = meta.get("transition_labels")
        trans = tuple(tuple(t) for t in trans) if trans else None
    else:
        kinds, cats = [], {}
        for c in feats:
            if pd.api.types.is_numeric_dtype(df[c]):
                kinds.append(NUMERIC)
            else:
                kinds.append(CATEGORICAL)
                cats[c] = tuple(sorted(df[c].astype(str).unique()))
        fs = FeatureSchema(tuple(feats), tuple(kinds), cats)
        cp = CutPoints(np.r_[0.0, np.unique(df["tj"].to_numpy(dtype=float))])
        K = int(df["k"].max()) if len(df) else 1
        trans = None
    X = np.empty((len(df), len(fs)))
    for i, (name, kind) in enumerate(zip(fs.names, fs.kinds)):
        X[:, i] = fs.encode(name, df[name].astype(str)) if kind == CATEGORICAL else df[name].to_numpy(float)
    return PedDataset(
        subject_id=df["id"].to_numpy(dtype=object),
        interval=df["j"].to_numpy(np.int64),
        tj=df["tj"].to_numpy(np.float64),
        toff=df["toff"].to_numpy(np.float64),
        label=df["label"].to_numpy(np.int8),
        transition=df["k"].to_numpy(np.int64),
        X=X,
        cutpoints=cp,
        feature_schema=fs,
        n_causes=K,
        transition_labels=trans,
    )
