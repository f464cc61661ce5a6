"""Subject-level survival data in start-stop form, plus CSV ingestion.

A dataset is a flat collection of spans ``(t_start, t_end]``. Each span
carries the feature values that hold on it, the event status at ``t_end``
and (for competing risks / multi-state data) the cause of the event and the
state the subject occupies during the span.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

NUMERIC = "numeric"
CATEGORICAL = "categorical"


class SchemaError(ValueError):
    """A column named by the ingestion schema is missing or malformed."""


class DataValidationError(ValueError):
    """A row violates a data invariant."""

    def __init__(self, message: str, row: Optional[int] = None, rule: Optional[str] = None):
        self.row = row
        self.rule = rule
        prefix = f"row {row}: " if row is not None else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class FeatureSchema:
    """Feature names and kinds, with the frozen dictionary for categoricals.

    Category ``categories[name][code]`` is the label encoded as ``code``.
    """

    names: tuple[str, ...] = ()
    kinds: tuple[str, ...] = ()
    categories: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "kinds", tuple(self.kinds))
        object.__setattr__(
            self, "categories", {k: tuple(v) for k, v in dict(self.categories).items()}
        )
        if len(self.names) != len(self.kinds):
            raise SchemaError("feature names and kinds differ in length")
        if len(set(self.names)) != len(self.names):
            raise SchemaError(f"duplicate feature names in {self.names}")
        for name, kind in zip(self.names, self.kinds):
            if kind not in (NUMERIC, CATEGORICAL):
                raise SchemaError(f"feature {name!r}: unknown kind {kind!r}")
            if kind == CATEGORICAL and name not in self.categories:
                raise SchemaError(f"categorical feature {name!r} has no category list")

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown feature {name!r}") from None

    def is_categorical(self) -> np.ndarray:
        return np.array([k == CATEGORICAL for k in self.kinds], dtype=bool)

    def n_categories(self) -> np.ndarray:
        return np.array(
            [len(self.categories[n]) if k == CATEGORICAL else 0 for n, k in zip(self.names, self.kinds)],
            dtype=np.int64,
        )

    def extend(self, names: Sequence[str], kinds: Sequence[str] | None = None) -> "FeatureSchema":
        kinds = list(kinds) if kinds is not None else [NUMERIC] * len(names)
        return FeatureSchema(self.names + tuple(names), self.kinds + tuple(kinds), self.categories)

    def encode(self, name: str, labels: Iterable) -> np.ndarray:
        """Map string labels of a categorical feature to their codes."""
        lookup = {lab: i for i, lab in enumerate(self.categories[name])}
        out = []
        for lab in labels:
            key = str(lab)
            if key not in lookup:
                raise DataValidationError(f"feature {name!r}: unknown category {key!r}")
            out.append(lookup[key])
        return np.asarray(out, dtype=np.float64)

    def decode(self, name: str, codes: Iterable) -> list[str]:
        cats = self.categories[name]
        return [cats[int(c)] for c in codes]

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "kinds": list(self.kinds),
            "categories": {k: list(v) for k, v in self.categories.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureSchema":
        return cls(tuple(d["names"]), tuple(d["kinds"]), {k: tuple(v) for k, v in d.get("categories", {}).items()})


@dataclass(frozen=True)
class SubjectSpan:
    subject_id: str
    t_start: float
    t_end: float
    status: int
    cause: Optional[int]
    features: tuple
    state: int = 0


@dataclass(frozen=True)
class Violation:
    subject_id: str
    rule: str
    message: str = ""
    row: Optional[int] = None


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SurvivalDataset:
    """Columnar storage of spans; row ``r`` of every array is one span.

    ``cause`` uses 0 for "no cause" (censored spans). ``state`` is the origin
    state of the span and only matters when ``transition_labels`` is given.
    """

    subject_id: np.ndarray
    t_start: np.ndarray
    t_end: np.ndarray
    status: np.ndarray
    cause: np.ndarray
    X: np.ndarray
    feature_schema: FeatureSchema
    n_causes: int = 1
    state: Optional[np.ndarray] = None
    transition_labels: Optional[tuple[tuple[int, int], ...]] = None

    def __post_init__(self):
        n = len(self.t_end)
        sid = np.asarray([str(s) for s in self.subject_id], dtype=object)
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(n, -1) if n else X.reshape(0, len(self.feature_schema))
        state = np.zeros(n, dtype=np.int64) if self.state is None else np.asarray(self.state, dtype=np.int64)
        object.__setattr__(self, "subject_id", _readonly(sid))
        object.__setattr__(self, "t_start", _readonly(np.asarray(self.t_start, dtype=np.float64)))
        object.__setattr__(self, "t_end", _readonly(np.asarray(self.t_end, dtype=np.float64)))
        object.__setattr__(self, "status", _readonly(np.asarray(self.status, dtype=np.int64)))
        object.__setattr__(self, "cause", _readonly(np.asarray(self.cause, dtype=np.int64)))
        object.__setattr__(self, "X", _readonly(X))
        object.__setattr__(self, "state", _readonly(state))
        object.__setattr__(self, "n_causes", int(self.n_causes))
        if self.transition_labels is not None:
            object.__setattr__(
                self, "transition_labels", tuple((int(a), int(b)) for a, b in self.transition_labels)
            )
        for name in ("subject_id", "t_start", "status", "cause", "state"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has length {len(getattr(self, name))}, expected {n}")
        if X.shape[0] != n:
            raise ValueError(f"feature matrix has {X.shape[0]} rows, expected {n}")

    def __len__(self) -> int:
        return len(self.t_end)

    @property
    def spans(self) -> list[SubjectSpan]:
        return [
            SubjectSpan(
                self.subject_id[r],
                float(self.t_start[r]),
                float(self.t_end[r]),
                int(self.status[r]),
                int(self.cause[r]) if self.cause[r] > 0 else None,
                tuple(self.X[r]),
                int(self.state[r]),
            )
            for r in range(len(self))
        ]

    @classmethod
    def from_spans(
        cls,
        spans: Sequence[SubjectSpan],
        feature_schema: FeatureSchema,
        n_causes: int = 1,
        transition_labels=None,
    ) -> "SurvivalDataset":
        p = len(feature_schema)
        return cls(
            subject_id=[s.subject_id for s in spans],
            t_start=[s.t_start for s in spans],
            t_end=[s.t_end for s in spans],
            status=[s.status for s in spans],
            cause=[s.cause or 0 for s in spans],
            X=np.array([s.features for s in spans], dtype=np.float64).reshape(len(spans), p),
            feature_schema=feature_schema,
            n_causes=n_causes,
            state=[s.state for s in spans],
            transition_labels=transition_labels,
        )

    def subjects(self) -> np.ndarray:
        """Subject ids in order of first appearance."""
        _, first = np.unique(self.subject_id, return_index=True)
        return self.subject_id[np.sort(first)]

    def normalized(self) -> "SurvivalDataset":
        """Spans sorted by (subject first appearance, t_start)."""
        order = self._canonical_order()
        return self._take(order)

    def _canonical_order(self) -> np.ndarray:
        ids, first, inv = np.unique(self.subject_id, return_index=True, return_inverse=True)
        rank = np.empty(len(ids), dtype=np.int64)
        rank[np.argsort(first, kind="stable")] = np.arange(len(ids))
        return np.lexsort((self.t_start, rank[inv]))

    def _sorted_order(self) -> np.ndarray:
        return np.lexsort((self.t_start, self.subject_id.astype(str)))

    def _take(self, rows: np.ndarray) -> "SurvivalDataset":
        return SurvivalDataset(
            subject_id=self.subject_id[rows],
            t_start=self.t_start[rows],
            t_end=self.t_end[rows],
            status=self.status[rows],
            cause=self.cause[rows],
            X=self.X[rows],
            feature_schema=self.feature_schema,
            n_causes=self.n_causes,
            state=self.state[rows],
            transition_labels=self.transition_labels,
        )

    def take_subjects(self, ids: Iterable[str]) -> "SurvivalDataset":
        """Sub-dataset holding all spans of the given subjects, in the given order."""
        ids = [str(i) for i in ids]
        rank = {s: i for i, s in enumerate(ids)}
        rows = [r for r in range(len(self)) if self.subject_id[r] in rank]
        rows.sort(key=lambda r: (rank[self.subject_id[r]], self.t_start[r]))
        return self._take(np.asarray(rows, dtype=np.int64))

    def subject_table(self) -> pd.DataFrame:
        """One row per subject: entry, exit, status, cause and first-span features.

        Multi-state trajectories are collapsed to the first entry and the
        last exit; use this for single-event or competing-risks data only.
        """
        if len(self) == 0:
            cols = ["id", "entry", "time", "status", "cause", *self.feature_schema.names]
            return pd.DataFrame(columns=cols)
        order = self._canonical_order()
        sid = self.subject_id[order]
        first = np.r_[True, sid[1:] != sid[:-1]]
        last = np.r_[sid[1:] != sid[:-1], True]
        df = pd.DataFrame(
            {
                "id": sid[first],
                "entry": self.t_start[order][first],
                "time": self.t_end[order][last],
                "status": self.status[order][last],
                "cause": self.cause[order][last],
            }
        )
        feats = self.X[order][first]
        for i, name in enumerate(self.feature_schema.names):
            df[name] = feats[:, i]
        return df

    def equals(self, other: "SurvivalDataset") -> bool:
        """Equality of content, ignoring the order of spans and subjects."""
        a, b = self._take(self._sorted_order()), other._take(other._sorted_order())
        return (
            a.feature_schema == b.feature_schema
            and a.n_causes == b.n_causes
            and a.transition_labels == b.transition_labels
            and np.array_equal(a.subject_id, b.subject_id)
            and np.array_equal(a.t_start, b.t_start)
            and np.array_equal(a.t_end, b.t_end)
            and np.array_equal(a.status, b.status)
            and np.array_equal(a.cause, b.cause)
            and np.array_equal(a.state, b.state)
            and np.array_equal(a.X, b.X)
        )


def validate(ds: SurvivalDataset) -> list[Violation]:
    """Check every dataset invariant; an empty list means the data is valid."""
    out: list[Violation] = []
    K = ds.n_causes
    p = len(ds.feature_schema)
    if ds.X.shape[1] != p:
        out.append(Violation("", "feature_length", f"{ds.X.shape[1]} feature columns, schema has {p}"))
    trans = ds.transition_labels
    if trans is not None:
        if len(trans) != K:
            out.append(Violation("", "transition_count", f"{len(trans)} transitions for {K} causes"))
        if len(set(trans)) != len(trans):
            out.append(Violation("", "duplicate_transition", "transition labels contain duplicates"))
    if K < 1:
        out.append(Violation("", "n_causes", "n_causes must be >= 1"))
    if len(ds) and not np.all(np.isfinite(ds.X)):
        for r in np.flatnonzero(~np.isfinite(ds.X).all(axis=1)):
            out.append(Violation(ds.subject_id[r], "missing_feature", "non-finite feature value", int(r)))

    order = ds._canonical_order() if len(ds) else np.zeros(0, dtype=np.int64)
    for pos, r in enumerate(order):
        sid = ds.subject_id[r]
        a, b, st, c = ds.t_start[r], ds.t_end[r], ds.status[r], ds.cause[r]
        if not (np.isfinite(a) and np.isfinite(b)):
            out.append(Violation(sid, "non_finite_time", f"span ({a}, {b}]", int(r)))
            continue
        if a < 0:
            out.append(Violation(sid, "negative_time", f"t_start={a}", int(r)))
        if not a < b:
            out.append(Violation(sid, "nonpositive_length", f"span ({a}, {b}]", int(r)))
        if st not in (0, 1):
            out.append(Violation(sid, "status_domain", f"status={st}", int(r)))
        if c < 0 or c > K:
            out.append(Violation(sid, "cause_out_of_range", f"cause={c} not in 1..{K}", int(r)))
        if st == 1 and K > 1 and c == 0:
            out.append(Violation(sid, "missing_cause", "event without cause", int(r)))
        if st == 0 and c != 0:
            out.append(Violation(sid, "cause_without_event", f"cause={c} on a censored span", int(r)))
        nxt = order[pos + 1] if pos + 1 < len(order) and ds.subject_id[order[pos + 1]] == sid else None
        if nxt is None:
            continue
        if ds.t_start[nxt] < b:
            out.append(Violation(sid, "overlap", f"({a}, {b}] overlaps ({ds.t_start[nxt]}, {ds.t_end[nxt]}]", int(nxt)))
        elif ds.t_start[nxt] > b:
            out.append(Violation(sid, "gap", f"gap between {b} and {ds.t_start[nxt]}", int(nxt)))
        if st == 1:
            k = max(int(c), 1)
            ok = (
                trans is not None
                and k <= len(trans)
                and trans[k - 1][0] == ds.state[r]
                and trans[k - 1][1] == ds.state[nxt]
            )
            if not ok:
                out.append(Violation(sid, "status_not_last", "event on a span that is not the last of its state occupancy", int(r)))
    return out


@dataclass
class CsvSchema:
    """Column mapping for :func:`load_csv`.

    Either ``time`` (simple layout, optionally with ``entry``) or both
    ``tstart`` and ``tstop`` (start-stop layout) must be given.
    """

    status: str = "status"
    time: Optional[str] = "time"
    tstart: Optional[str] = None
    tstop: Optional[str] = None
    entry: Optional[str] = None
    id: Optional[str] = "id"
    cause: Optional[str] = None
    state: Optional[str] = None
    features: list[str] = field(default_factory=list)
    categorical: list[str] = field(default_factory=list)
    n_causes: Optional[int] = None
    transitions: Optional[list[tuple[int, int]]] = None
    delimiter: str = ","

    @classmethod
    def from_dict(cls, d: Mapping) -> "CsvSchema":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise SchemaError(f"unknown schema keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("transitions") is not None:
            d["transitions"] = [tuple(t) for t in d["transitions"]]
        return cls(**d)

    @property
    def start_stop(self) -> bool:
        return self.tstart is not None or self.tstop is not None


def _numeric_column(df: pd.DataFrame, col: str) -> np.ndarray:
    # float() parses decimal strings exactly; pandas' fast parser can be off by an ulp
    out = np.empty(len(df))
    for r, v in enumerate(df[col]):
        try:
            out[r] = float(v)
        except ValueError:
            raise DataValidationError(f"column {col!r}: non-numeric value {v!r}", row=r, rule="non_numeric") from None
    return out


def load_csv(
    path: str | Path,
    schema: CsvSchema,
    feature_schema: Optional[FeatureSchema] = None,
) -> SurvivalDataset:
    """Read and validate a survival CSV.

    ``feature_schema`` freezes the categorical encoding (e.g. the one stored
    in a fitted model); without it, categories are coded in sorted order.
    Row indices in errors are 0-based data rows (header excluded).
    """
    df = pd.read_csv(path, sep=schema.delimiter, dtype=str, keep_default_na=False)
    if schema.start_stop and not (schema.tstart and schema.tstop):
        raise SchemaError("start-stop layout needs both tstart and tstop columns")
    needed = [schema.status] + list(schema.features)
    needed += [schema.tstart, schema.tstop] if schema.start_stop else [schema.time]
    for opt in (schema.entry, schema.cause, schema.state):
        if opt:
            needed.append(opt)
    if schema.id and (schema.id in df.columns or schema.start_stop):
        needed.append(schema.id)
    for col in needed:
        if col is None:
            raise SchemaError("time column not configured")
        if col not in df.columns:
            raise SchemaError(f"missing column {col!r}")

    n = len(df)
    if schema.start_stop:
        t_start = _numeric_column(df, schema.tstart)
        t_end = _numeric_column(df, schema.tstop)
    else:
        t_end = _numeric_column(df, schema.time)
        t_start = _numeric_column(df, schema.entry) if schema.entry else np.zeros(n)
    status_f = _numeric_column(df, schema.status)
    bad = ~np.isin(status_f, (0.0, 1.0))
    if bad.any():
        r = int(np.flatnonzero(bad)[0])
        raise DataValidationError(f"status {df[schema.status].iloc[r]!r} not in {{0,1}}", row=r, rule="status_domain")
    status = status_f.astype(np.int64)
    for r in range(n):
        if not t_end[r] > t_start[r]:
            rule = "nonpositive_time" if t_start[r] == 0 else "nonpositive_length"
            raise DataValidationError(f"exit time {t_end[r]} not after entry {t_start[r]}", row=r, rule=rule)
        if t_start[r] < 0:
            raise DataValidationError(f"negative entry time {t_start[r]}", row=r, rule="negative_time")

    if schema.cause:
        raw = df[schema.cause].str.strip()
        cause = np.zeros(n, dtype=np.int64)
        filled = (raw != "").to_numpy()
        if filled.any():
            cause[filled] = _numeric_column(df[filled].reset_index(drop=True), schema.cause).astype(np.int64)
        cause[status == 0] = 0
    else:
        cause = status.copy()
    K = schema.n_causes if schema.n_causes is not None else (
        len(schema.transitions) if schema.transitions else max(1, int(cause.max(initial=0)))
    )
    if K > 1 and not schema.cause:
        raise SchemaError("n_causes > 1 requires a cause column")
    if K == 1:
        cause = np.where(status == 1, 1, 0)
    for r in range(n):
        if status[r] == 1 and not 1 <= cause[r] <= K:
            raise DataValidationError(f"cause {cause[r]} outside 1..{K}", row=r, rule="cause_out_of_range")

    if schema.id and schema.id in df.columns:
        ids = df[schema.id].str.strip().to_numpy(dtype=object)
    else:
        ids = np.array([str(i + 1) for i in range(n)], dtype=object)
    state = _numeric_column(df, schema.state).astype(np.int64) if schema.state else None

    if feature_schema is None:
        kinds, cats = [], {}
        for name in schema.features:
            if name in schema.categorical:
                kinds.append(CATEGORICAL)
                cats[name] = tuple(sorted(set(df[name].str.strip())))
            else:
                kinds.append(NUMERIC)
        feature_schema = FeatureSchema(tuple(schema.features), tuple(kinds), cats)
    elif tuple(feature_schema.names) != tuple(schema.features):
        raise SchemaError(f"features {schema.features} do not match frozen schema {list(feature_schema.names)}")

    X = np.empty((n, len(feature_schema)), dtype=np.float64)
    for i, (name, kind) in enumerate(zip(feature_schema.names, feature_schema.kinds)):
        col = df[name].str.strip()
        empty = (col == "").to_numpy()
        if empty.any():
            r = int(np.flatnonzero(empty)[0])
            raise DataValidationError(f"missing value for feature {name!r}", row=r, rule="missing_feature")
        if kind == CATEGORICAL:
            try:
                X[:, i] = feature_schema.encode(name, col)
            except DataValidationError as e:
                r = int(np.flatnonzero(~col.isin(feature_schema.categories[name]).to_numpy())[0])
                raise DataValidationError(str(e), row=r, rule="unknown_category") from None
        else:
            X[:, i] = _numeric_column(df, name)

    ds = SurvivalDataset(
        subject_id=ids,
        t_start=t_start,
        t_end=t_end,
        status=status,
        cause=cause,
        X=X,
        feature_schema=feature_schema,
        n_causes=K,
        state=state,
        transition_labels=schema.transitions,
    )
    problems = validate(ds)
    if problems:
        v = problems[0]
        raise DataValidationError(f"subject {v.subject_id}: {v.rule} ({v.message})", row=v.row, rule=v.rule)
    return ds


def write_csv(ds: SurvivalDataset, path: str | Path, delimiter: str = ",") -> CsvSchema:
    """Write ``ds`` in start-stop layout; returns the schema that re-reads it."""
    fs = ds.feature_schema
    multistate = ds.transition_labels is not None
    header = ["id", "tstart", "tstop", "status", "cause"] + (["state"] if multistate else []) + list(fs.names)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter)
        w.writerow(header)
        for r in range(len(ds)):
            row = [ds.subject_id[r], repr(float(ds.t_start[r])), repr(float(ds.t_end[r])), int(ds.status[r])]
            row.append(int(ds.cause[r]) if ds.cause[r] > 0 else "")
            if multistate:
                row.append(int(ds.state[r]))
            for i, (name, kind) in enumerate(zip(fs.names, fs.kinds)):
                v = ds.X[r, i]
                row.append(fs.categories[name][int(v)] if kind == CATEGORICAL else repr(float(v)))
            w.writerow(row)
    return CsvSchema(
        id="id",
        time=None,
        tstart="tstart",
        tstop="tstop",
        status="status",
        cause="cause",
        state="state" if multistate else None,
        features=list(fs.names),
        categorical=[n for n, k in zip(fs.names, fs.kinds) if k == CATEGORICAL],
        n_causes=ds.n_causes,
        transitions=list(ds.transition_labels) if multistate else None,
        delimiter=delimiter,
    )
