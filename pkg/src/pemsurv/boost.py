"""Second-order gradient boosted trees for the Poisson likelihood with offset.

Training works on the margin ``eta`` (log hazard). The Poisson mean of a PED
row is ``mu = exp(eta + log(toff))``, giving per-row gradient ``mu - y`` and
hessian ``mu`` of the negative log-likelihood. Prediction returns ``eta``
without the offset, so ``exp(eta)`` is the hazard and not the expected count.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import _kernels as kern
from .ped import CutPoints, PedDataset, model_schema
from .survdata import FeatureSchema

log = logging.getLogger(__name__)

MODEL_FORMAT = "pemsurv-model"
MODEL_VERSION = 1


@dataclass(frozen=True)
class SplitConstraint:
    """Ban splits on ``feature`` at depth >= ``depth``, or force them at exactly ``depth``.

    The root has depth 0. A forced split takes the best threshold on the
    feature regardless of gain and child weight; a node where the feature
    is constant falls back to the regular search.
    """

    feature: str
    rule: str = "ban"
    depth: int = 0

    def __post_init__(self):
        if self.rule not in ("ban", "force"):
            raise ValueError(f"split constraint rule must be 'ban' or 'force', got {self.rule!r}")
        if self.depth < 0:
            raise ValueError("split constraint depth must be >= 0")


@dataclass(frozen=True)
class BoostParams:
    learning_rate: float = 0.05
    n_rounds: int = 1000
    early_stopping_rounds: Optional[int] = None
    max_depth: int = 6
    min_loss_reduction: float = 0.0
    min_child_weight: float = 1.0
    row_subsample: float = 1.0
    col_subsample: float = 1.0
    l2_lambda: float = 1.0
    base_margin_init: float = 0.0
    # leaf weights are clipped to +-max_delta_step before shrinkage; 0 disables
    max_delta_step: float = 0.7
    tree_method: str = "exact"
    max_bins: int = 256
    split_constraints: tuple[SplitConstraint, ...] = ()
    rng_seed: int = 0

    def __post_init__(self):
        cons = tuple(c if isinstance(c, SplitConstraint) else SplitConstraint(**c) for c in self.split_constraints)
        object.__setattr__(self, "split_constraints", cons)
        checks = [
            (self.learning_rate > 0, "learning_rate must be > 0"),
            (int(self.n_rounds) == self.n_rounds and self.n_rounds >= 1, "n_rounds must be a positive integer"),
            (self.early_stopping_rounds is None or self.early_stopping_rounds >= 1, "early_stopping_rounds must be positive"),
            (int(self.max_depth) == self.max_depth and self.max_depth >= 1, "max_depth must be an integer >= 1"),
            (self.min_loss_reduction >= 0, "min_loss_reduction must be >= 0"),
            (self.min_child_weight >= 0, "min_child_weight must be >= 0"),
            (0 < self.row_subsample <= 1, "row_subsample must be in (0, 1]"),
            (0 < self.col_subsample <= 1, "col_subsample must be in (0, 1]"),
            (self.l2_lambda >= 0, "l2_lambda must be >= 0"),
            (self.max_delta_step >= 0, "max_delta_step must be >= 0"),
            (self.tree_method in ("exact", "hist"), "tree_method must be 'exact' or 'hist'"),
            (2 <= self.max_bins <= 65536, "max_bins must be in [2, 65536]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    def replace(self, **changes) -> "BoostParams":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(changes)
        return BoostParams(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_constraints"] = [asdict(c) for c in self.split_constraints]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BoostParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown boosting parameters: {sorted(unknown)}")
        d = dict(d)
        d["split_constraints"] = tuple(SplitConstraint(**c) for c in d.get("split_constraints", ()))
        return cls(**d)


@dataclass(eq=False)
class RegressionTree:
    """Array-encoded binary tree; ``feature == -1`` marks a leaf.

    Numeric nodes send ``x < threshold`` left; categorical nodes send
    ``x == threshold`` (a category code) left. ``value`` is the unshrunk
    leaf weight.
    """

    feature: np.ndarray
    threshold: np.ndarray
    categorical: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray
    cover: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def is_leaf(self) -> np.ndarray:
        return self.feature < 0

    def depth(self) -> np.ndarray:
        d = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                d[self.left[i]] = d[i] + 1
                d[self.right[i]] = d[i] + 1
        return d

    def predict(self, X: np.ndarray) -> np.ndarray:
        out = np.zeros(len(X))
        kern.predict_packed(
            np.ascontiguousarray(X, dtype=np.float64), self.feature, self.threshold, self.categorical,
            self.left, self.right, self.value, np.zeros(1, dtype=np.int64), 1.0, out,
        )
        return out

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "categorical": self.categorical.astype(int).tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "gain": self.gain.tolist(),
            "cover": self.cover.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegressionTree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=np.float64),
            categorical=np.asarray(d["categorical"], dtype=np.bool_),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            value=np.asarray(d["value"], dtype=np.float64),
            gain=np.asarray(d["gain"], dtype=np.float64),
            cover=np.asarray(d["cover"], dtype=np.float64),
        )

    def same_structure(self, other: "RegressionTree") -> bool:
        return all(
            np.array_equal(getattr(self, f.name), getattr(other, f.name)) for f in fields(self)
        )


@dataclass(eq=False)
class BoostedEnsemble:
    trees: list[RegressionTree]
    params: BoostParams
    feature_schema: FeatureSchema
    cutpoints: CutPoints
    n_causes: int = 1
    best_iteration: Optional[int] = None
    transition_labels: Optional[tuple[tuple[int, int], ...]] = None
    history: dict = field(default_factory=dict)
    _packed: Optional[tuple] = field(default=None, repr=False)

    engine = "gbt"

    @property
    def n_used(self) -> int:
        return len(self.trees) if self.best_iteration is None else self.best_iteration + 1

    @property
    def user_schema(self) -> FeatureSchema:
        """Schema of the subject features (without ``tj`` and ``k``)."""
        fs = self.feature_schema
        return FeatureSchema(fs.names[:-2], fs.kinds[:-2], fs.categories)

    def _pack(self):
        if self._packed is None or self._packed[0] != self.n_used:
            trees = self.trees[: self.n_used]
            sizes = np.array([t.n_nodes for t in trees], dtype=np.int64)
            roots = np.r_[0, np.cumsum(sizes)[:-1]].astype(np.int64) if len(trees) else np.zeros(0, np.int64)

            def cat(name, dtype, shift=False):
                if not trees:
                    return np.zeros(0, dtype=dtype)
                parts = [getattr(t, name) + (off if shift else 0) for t, off in zip(trees, roots)]
                return np.concatenate(parts).astype(dtype)

            left = cat("left", np.int64, shift=True)
            right = cat("right", np.int64, shift=True)
            self._packed = (
                self.n_used,
                cat("feature", np.int64),
                cat("threshold", np.float64),
                cat("categorical", np.bool_),
                left,
                right,
                cat("value", np.float64),
                roots,
            )
        return self._packed[1:]

    def predict_margin(self, rows) -> np.ndarray:
        return predict_margin(self, rows)

    def interval_hazards(self, X) -> np.ndarray:
        """Hazards of shape (n_subjects, J, K) for constant subject features ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        n, J, K = len(X), self.cutpoints.n_intervals, self.n_causes
        tj = self.cutpoints.kappa[1:]
        rows = np.empty((n, J, K, X.shape[1] + 2))
        rows[..., :-2] = X[:, None, None, :]
        rows[..., -2] = tj[None, :, None]
        rows[..., -1] = np.arange(1, K + 1)[None, None, :]
        eta = self.predict_margin(rows.reshape(n * J * K, -1))
        return np.exp(eta).reshape(n, J, K)

    def feature_gain_report(self) -> dict[str, float]:
        return feature_gain_report(self)

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "engine": self.engine,
            "params": self.params.to_dict(),
            "feature_schema": self.feature_schema.to_dict(),
            "cutpoints": self.cutpoints.tolist(),
            "n_causes": self.n_causes,
            "transition_labels": [list(t) for t in self.transition_labels] if self.transition_labels else None,
            "best_iteration": self.best_iteration,
            "history": self.history,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BoostedEnsemble":
        check_model_header(d, "gbt")
        trans = d.get("transition_labels")
        return cls(
            trees=[RegressionTree.from_dict(t) for t in d["trees"]],
            params=BoostParams.from_dict(d["params"]),
            feature_schema=FeatureSchema.from_dict(d["feature_schema"]),
            cutpoints=CutPoints(d["cutpoints"]),
            n_causes=int(d["n_causes"]),
            best_iteration=d.get("best_iteration"),
            transition_labels=tuple(tuple(t) for t in trans) if trans else None,
            history=d.get("history", {}),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))


def check_model_header(d: dict, engine: str) -> None:
    if d.get("format") != MODEL_FORMAT:
        raise ValueError(f"not a {MODEL_FORMAT} document")
    if d.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {d.get('version')}, expected {MODEL_VERSION}")
    if d.get("engine") != engine:
        raise ValueError(f"model engine is {d.get('engine')!r}, expected {engine!r}")


def poisson_grad_hess(margin, y):
    """Gradient and hessian of the per-row Poisson deviance / 2 w.r.t. the full margin."""
    mu = np.exp(margin)
    return mu - y, mu


def poisson_deviance(y, margin) -> np.ndarray:
    """Per-row Poisson deviance ``2 (y log(y/mu) - (y - mu))`` at full margin ``log(mu)``."""
    mu = np.exp(margin)
    ylogy = np.where(y > 0, y * (np.log(np.where(y > 0, y, 1.0)) - margin), 0.0)
    return 2.0 * (ylogy - (y - mu))


def predict_margin(model: BoostedEnsemble, rows, n_trees: Optional[int] = None) -> np.ndarray:
    """Log-hazard for PED-style feature rows (user features, then ``tj``, ``k``)."""
    X = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    fs = model.feature_schema
    if X.shape[1] != len(fs):
        raise ValueError(f"rows have {X.shape[1]} columns, model expects {len(fs)} ({list(fs.names)})")
    for i, (name, kind) in enumerate(zip(fs.names, fs.kinds)):
        if kind == "categorical":
            col = X[:, i]
            bad = (col != np.round(col)) | (col < 0) | (col >= len(fs.categories[name]))
            if bad.any():
                raise ValueError(f"feature {name!r}: unknown categorical code {col[bad][0]!r}")
    out = np.full(len(X), model.params.base_margin_init, dtype=np.float64)
    if n_trees is not None and n_trees != model.n_used:
        sub = BoostedEnsemble(model.trees[:n_trees], model.params, fs, model.cutpoints, model.n_causes)
        packed = sub._pack()
    else:
        packed = model._pack()
    feature, threshold, categorical, left, right, value, roots = packed
    if len(roots):
        kern.predict_packed(
            np.ascontiguousarray(X), feature, threshold, categorical, left, right, value,
            roots, model.params.learning_rate, out,
        )
    return out


def feature_gain_report(model: BoostedEnsemble) -> dict[str, float]:
    """Total split gain per feature over the trees used for prediction."""
    totals = np.zeros(len(model.feature_schema))
    for t in model.trees[: model.n_used]:
        inner = t.feature >= 0
        np.add.at(totals, t.feature[inner], np.maximum(t.gain[inner], 0.0))
    return dict(zip(model.feature_schema.names, totals.tolist()))


@dataclass
class _Prepared:
    X: np.ndarray
    is_cat: np.ndarray
    n_cats: np.ndarray
    order: Optional[np.ndarray]
    svals: Optional[np.ndarray]
    codes: list
    edges: list


def _bin_edges(col: np.ndarray, max_bins: int) -> np.ndarray:
    u = np.unique(col)
    if len(u) > max_bins:
        u = np.unique(np.quantile(col, np.linspace(0, 1, max_bins), method="nearest"))
    return 0.5 * (u[:-1] + u[1:])


def _prepare(X: np.ndarray, fs: FeatureSchema, params: BoostParams) -> _Prepared:
    is_cat = fs.is_categorical()
    n_cats = fs.n_categories()
    codes, edges = [], []
    order = svals = None
    if params.tree_method == "exact":
        order = np.empty(X.shape, dtype=np.int64, order="F")
        svals = np.empty(X.shape, dtype=np.float64, order="F")
    for f in range(X.shape[1]):
        if is_cat[f]:
            codes.append(X[:, f].astype(np.int64))
            edges.append(None)
        elif params.tree_method == "hist":
            e = _bin_edges(X[:, f], params.max_bins)
            codes.append(np.searchsorted(e, X[:, f], side="right").astype(np.int64))
            edges.append(e)
        else:
            order[:, f] = np.argsort(X[:, f], kind="stable")
            svals[:, f] = X[order[:, f], f]
            codes.append(None)
            edges.append(None)
    return _Prepared(np.ascontiguousarray(X), is_cat, n_cats, order, svals, codes, edges)


def _grow_tree(prep: _Prepared, g, h, pos, params: BoostParams, allowed, forced_at) -> RegressionTree:
    lam, mcw, gamma = params.l2_lambda, params.min_child_weight, params.min_loss_reduction
    X = prep.X
    feature, threshold, categorical, left, right, value, gain, cover = ([] for _ in range(8))

    def new_node(G, H):
        w = -G / max(H + lam, kern.HESS_FLOOR)
        if params.max_delta_step > 0:
            w = min(max(w, -params.max_delta_step), params.max_delta_step)
        for lst, v in ((feature, -1), (threshold, 0.0), (categorical, False), (left, -1),
                       (right, -1), (value, w), (gain, 0.0), (cover, H)):
            lst.append(v)
        return len(feature) - 1

    G, H, C = kern.node_sums(pos, g, h, 1)
    level = [new_node(G[0], H[0])]
    for depth in range(params.max_depth):
        L = len(level)
        best_gain = np.zeros(L)
        best_feat = np.full(L, -1, dtype=np.int64)
        best_thr = np.zeros(L)
        forced = forced_at.get(depth, [])
        candidates = [(f, False) for f in allowed(depth) if f not in forced] + [(f, True) for f in forced]
        forced_done = np.zeros(L, dtype=bool)
        for f, is_forced in candidates:
            fg = np.full(L, -np.inf)
            fthr = np.zeros(L)
            if prep.is_cat[f] or prep.codes[f] is not None:
                nb = int(prep.n_cats[f]) if prep.is_cat[f] else len(prep.edges[f]) + 1
                fbin = np.zeros(L, dtype=np.int64)
                kern.scan_bins(prep.codes[f], nb, pos, g, h, G, H, C, lam, mcw, 0.0 if is_forced else gamma,
                               is_forced, bool(prep.is_cat[f]), fg, fbin)
                ok = np.isfinite(fg)
                fthr[ok] = fbin[ok] if prep.is_cat[f] else prep.edges[f][fbin[ok]]
            else:
                kern.scan_sorted(prep.svals[:, f], prep.order[:, f], pos, g, h, G, H, lam, mcw,
                                 0.0 if is_forced else gamma, is_forced, fg, fthr)
            if is_forced:
                upd = np.isfinite(fg) & ~forced_done
                forced_done |= upd
            else:
                upd = fg > best_gain
            best_gain[upd] = fg[upd]
            best_feat[upd] = f
            best_thr[upd] = fthr[upd]
        split = best_feat >= 0
        if not split.any():
            break
        left_pos = np.full(L, -1, dtype=np.int64)
        left_pos[split] = 2 * np.arange(split.sum())
        split_cat = np.zeros(L, dtype=np.bool_)
        split_cat[split] = prep.is_cat[best_feat[split]]
        n_next = 2 * int(split.sum())
        new_pos = np.empty_like(pos)
        Gn, Hn, Cn = np.zeros(n_next), np.zeros(n_next), np.zeros(n_next, dtype=np.int64)
        kern.route_rows(X, pos, best_feat, best_thr, split_cat, left_pos, g, h, new_pos, Gn, Hn, Cn)
        nxt = []
        for p in np.flatnonzero(split):
            node = level[p]
            lo = new_node(Gn[left_pos[p]], Hn[left_pos[p]])
            hi = new_node(Gn[left_pos[p] + 1], Hn[left_pos[p] + 1])
            feature[node], threshold[node], categorical[node] = int(best_feat[p]), float(best_thr[p]), bool(split_cat[p])
            left[node], right[node], gain[node] = lo, hi, float(best_gain[p])
            nxt += [lo, hi]
        level, pos, G, H, C = nxt, new_pos, Gn, Hn, Cn

    return RegressionTree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=np.float64),
        categorical=np.asarray(categorical, dtype=np.bool_),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        value=np.asarray(value, dtype=np.float64),
        gain=np.asarray(gain, dtype=np.float64),
        cover=np.asarray(cover, dtype=np.float64),
    )


def _check_compatible(ped: PedDataset, valid: PedDataset) -> None:
    if valid.feature_schema != ped.feature_schema:
        raise ValueError("validation PED feature schema differs from training PED")
    if valid.n_causes != ped.n_causes:
        raise ValueError(f"validation PED has {valid.n_causes} causes, training has {ped.n_causes}")


def fit(ped: PedDataset, params: BoostParams, valid: Optional[PedDataset] = None) -> BoostedEnsemble:
    """Fit boosted trees to a PED by Newton boosting on the Poisson likelihood.

    With ``early_stopping_rounds`` set, training stops once the mean
    validation deviance has not improved for that many rounds, and the
    model predicts with the trees up to the best round.
    """
    if len(ped) == 0:
        raise ValueError("cannot fit on an empty PED")
    if params.early_stopping_rounds is not None and valid is None:
        raise ValueError("early_stopping_rounds requires a validation set")
    if valid is not None:
        _check_compatible(ped, valid)
    schema = model_schema(ped.feature_schema)
    name_to_idx = {n: i for i, n in enumerate(schema.names)}
    for c in params.split_constraints:
        if c.feature not in name_to_idx:
            raise ValueError(f"split constraint on unknown feature {c.feature!r}")

    X = ped.design_matrix()
    y = ped.label.astype(np.float64)
    offset = ped.offset
    prep = _prepare(X, schema, params)
    p = X.shape[1]
    n = len(y)
    rng = np.random.default_rng(params.rng_seed)

    bans = [(name_to_idx[c.feature], c.depth) for c in params.split_constraints if c.rule == "ban"]
    forced_at: dict[int, list[int]] = {}
    for c in params.split_constraints:
        if c.rule == "force":
            forced_at.setdefault(c.depth, []).append(name_to_idx[c.feature])

    margin = np.full(n, params.base_margin_init) + offset
    if valid is not None:
        Xv = np.ascontiguousarray(valid.design_matrix())
        yv = valid.label.astype(np.float64)
        margin_v = np.full(len(yv), params.base_margin_init) + valid.offset

    trees: list[RegressionTree] = []
    history = {"train_deviance": [], "valid_deviance": []}
    best_iter, best_dev = None, np.inf
    n_cols = max(1, int(round(params.col_subsample * p)))
    n_rows = max(1, int(round(params.row_subsample * n)))

    for it in range(params.n_rounds):
        g, h = poisson_grad_hess(margin, y)
        if n_rows < n:
            pos = np.full(n, -1, dtype=np.int64)
            pos[rng.choice(n, size=n_rows, replace=False)] = 0
        else:
            pos = np.zeros(n, dtype=np.int64)
        cols = np.sort(rng.choice(p, size=n_cols, replace=False)) if n_cols < p else np.arange(p)

        def allowed(depth, cols=cols):
            banned = {f for f, d in bans if depth >= d}
            return [int(f) for f in cols if f not in banned]

        tree = _grow_tree(prep, g, h, pos, params, allowed, forced_at)
        trees.append(tree)
        margin += params.learning_rate * tree.predict(prep.X)
        history["train_deviance"].append(float(np.mean(poisson_deviance(y, margin))))
        if valid is not None:
            margin_v += params.learning_rate * tree.predict(Xv)
            dev = float(np.mean(poisson_deviance(yv, margin_v)))
            history["valid_deviance"].append(dev)
            if dev < best_dev:
                best_dev, best_iter = dev, it
            elif params.early_stopping_rounds is not None and it - best_iter >= params.early_stopping_rounds:
                break

    if params.early_stopping_rounds is None:
        best_iter = None
    return BoostedEnsemble(
        trees=trees,
        params=params,
        feature_schema=schema,
        cutpoints=ped.cutpoints,
        n_causes=ped.n_causes,
        best_iteration=best_iter,
        transition_labels=ped.transition_labels,
        history=history,
    )


def load_model(path: str | Path):
    """Load any model document written by this package."""
    d = json.loads(Path(path).read_text())
    engine = d.get("engine")
    if engine == "gbt":
        return BoostedEnsemble.from_dict(d)
    from .baselines import KaplanMeierModel, PemGlm

    if engine == "glm":
        return PemGlm.from_dict(d)
    if engine == "km":
        return KaplanMeierModel.from_dict(d)
    raise ValueError(f"unknown model engine {engine!r}")
