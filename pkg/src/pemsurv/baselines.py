"""Reference estimators: Kaplan-Meier and the piece-wise exponential Poisson GLM.

The GLM has one log-baseline-hazard per interval and linear feature effects,
fitted separately per transition. With cut-points at all event times it is
the proportional-hazards comparator for the boosted model.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .boost import MODEL_FORMAT, MODEL_VERSION, check_model_header
from .ped import CutPoints, PedDataset
from .survdata import CATEGORICAL, FeatureSchema, SurvivalDataset

log = logging.getLogger(__name__)


class GlmDivergenceError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class KmCurve:
    """Product-limit estimate; ``surv[i]`` holds on ``[times[i], times[i+1])``."""

    times: np.ndarray
    surv: np.ndarray
    n_risk: np.ndarray
    n_event: np.ndarray

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.times, t, side="right")
        return np.r_[1.0, self.surv][idx]

    def left(self, t) -> np.ndarray:
        """Left limit S(t-)."""
        t = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.times, t, side="left")
        return np.r_[1.0, self.surv][idx]

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("times", "surv", "n_risk", "n_event")}

    @classmethod
    def from_dict(cls, d: dict) -> "KmCurve":
        return cls(*(np.asarray(d[k], dtype=np.float64) for k in ("times", "surv", "n_risk", "n_event")))


def km_estimate(time, event, entry=None) -> KmCurve:
    """Kaplan-Meier from arrays; ``event`` is truthy for events.

    With ``entry``, a subject is in the risk set at ``t`` iff ``entry < t <= time``.
    Only times with at least one event become steps.
    """
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event).astype(bool)
    entry = np.zeros_like(time) if entry is None else np.asarray(entry, dtype=np.float64)
    ev_times = np.unique(time[event])
    exits = np.sort(time)
    entries = np.sort(entry)
    # at risk at t: entered strictly before t and not exited before t
    n_risk = np.searchsorted(entries, ev_times, side="left") - np.searchsorted(exits, ev_times, side="left")
    d = np.bincount(np.searchsorted(ev_times, time[event]), minlength=len(ev_times))
    with np.errstate(divide="ignore", invalid="ignore"):
        factors = np.where(n_risk > 0, 1.0 - d / n_risk, 1.0)
    return KmCurve(ev_times, np.cumprod(factors), n_risk.astype(np.float64), d.astype(np.float64))


def km_fit(ds: SurvivalDataset) -> KmCurve:
    """All-cause Kaplan-Meier at the subject level, honouring delayed entry."""
    st = ds.subject_table()
    return km_estimate(st["time"].to_numpy(float), st["status"].to_numpy() == 1, st["entry"].to_numpy(float))


def aalen_johansen(time, cause, n_causes: int, entry=None):
    """Cause-specific cumulative incidence steps.

    Returns ``(times, surv, cif)`` with ``cif`` of shape (K, len(times)),
    all right-continuous step functions at the event times.
    """
    time = np.asarray(time, dtype=np.float64)
    cause = np.asarray(cause, dtype=np.int64)
    km = km_estimate(time, cause > 0, entry)
    s_prev = np.r_[1.0, km.surv[:-1]]
    cif = np.zeros((n_causes, len(km.times)))
    idx = np.searchsorted(km.times, time[cause > 0])
    for k in range(1, n_causes + 1):
        dk = np.bincount(idx[cause[cause > 0] == k], minlength=len(km.times))
        with np.errstate(divide="ignore", invalid="ignore"):
            inc = np.where(km.n_risk > 0, s_prev * dk / km.n_risk, 0.0)
        cif[k - 1] = np.cumsum(inc)
    return km.times, km.surv, cif


def _n_rows(X) -> int:
    return np.shape(X)[0] if np.ndim(X) == 2 else 1


@dataclass(eq=False)
class KaplanMeierModel:
    """Feature-free reference model (KM survival, Aalen-Johansen incidence)."""

    times: np.ndarray
    surv: np.ndarray
    cif: np.ndarray
    n_causes: int = 1
    feature_schema: FeatureSchema = field(default_factory=FeatureSchema)

    engine = "km"

    @classmethod
    def fit(cls, ds: SurvivalDataset) -> "KaplanMeierModel":
        st = ds.subject_table()
        times, surv, cif = aalen_johansen(
            st["time"].to_numpy(float), st["cause"].to_numpy(), ds.n_causes, st["entry"].to_numpy(float)
        )
        return cls(times, surv, cif, ds.n_causes, ds.feature_schema)

    def predict_survival(self, X, times) -> np.ndarray:
        n = _n_rows(X)
        idx = np.searchsorted(self.times, np.asarray(times, dtype=np.float64), side="right")
        row = np.r_[1.0, self.surv][idx]
        return np.tile(row, (n, 1))

    def predict_cif(self, X, times) -> np.ndarray:
        n = _n_rows(X)
        idx = np.searchsorted(self.times, np.asarray(times, dtype=np.float64), side="right")
        rows = np.concatenate([np.zeros((self.n_causes, 1)), self.cif], axis=1)[:, idx]
        return np.repeat(rows[:, None, :], n, axis=1)

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "engine": self.engine,
            "times": self.times.tolist(),
            "surv": self.surv.tolist(),
            "cif": self.cif.tolist(),
            "n_causes": self.n_causes,
            "feature_schema": self.feature_schema.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KaplanMeierModel":
        check_model_header(d, "km")
        return cls(
            np.asarray(d["times"], dtype=np.float64),
            np.asarray(d["surv"], dtype=np.float64),
            np.asarray(d["cif"], dtype=np.float64).reshape(int(d["n_causes"]), -1),
            int(d["n_causes"]),
            FeatureSchema.from_dict(d["feature_schema"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))


def glm_design(X: np.ndarray, fs: FeatureSchema) -> tuple[np.ndarray, list[str]]:
    """Numeric features as-is; categoricals as treatment dummies (first level dropped)."""
    cols, names = [], []
    for i, (name, kind) in enumerate(zip(fs.names, fs.kinds)):
        if kind == CATEGORICAL:
            for c, label in enumerate(fs.categories[name][1:], start=1):
                cols.append((X[:, i] == c).astype(np.float64))
                names.append(f"{name}[{label}]")
        else:
            cols.append(X[:, i])
            names.append(name)
    Z = np.column_stack(cols) if cols else np.zeros((len(X), 0))
    return Z, names


@dataclass(eq=False)
class PemGlm:
    """Per-transition interval log-baseline hazards plus linear feature effects.

    ``intercepts`` has shape (K, J); ``coef`` has shape (K, n_design_columns).
    """

    intercepts: np.ndarray
    coef: np.ndarray
    coef_names: list[str]
    cutpoints: CutPoints
    feature_schema: FeatureSchema
    n_causes: int = 1
    ridge: float = 0.0
    converged: bool = True
    n_iter: list = field(default_factory=list)
    deviance: list = field(default_factory=list)

    engine = "glm"

    def interval_hazards(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        Z, _ = glm_design(X, self.feature_schema)
        lin = Z @ self.coef.T  # (n, K)
        eta = self.intercepts.T[None, :, :] + lin[:, None, :]
        return np.exp(eta)

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "engine": self.engine,
            "intercepts": self.intercepts.tolist(),
            "coef": self.coef.tolist(),
            "coef_names": list(self.coef_names),
            "cutpoints": self.cutpoints.tolist(),
            "feature_schema": self.feature_schema.to_dict(),
            "n_causes": self.n_causes,
            "ridge": self.ridge,
            "converged": self.converged,
            "n_iter": self.n_iter,
            "deviance": self.deviance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PemGlm":
        check_model_header(d, "glm")
        K = int(d["n_causes"])
        return cls(
            intercepts=np.asarray(d["intercepts"], dtype=np.float64).reshape(K, -1),
            coef=np.asarray(d["coef"], dtype=np.float64).reshape(K, -1),
            coef_names=list(d["coef_names"]),
            cutpoints=CutPoints(d["cutpoints"]),
            feature_schema=FeatureSchema.from_dict(d["feature_schema"]),
            n_causes=K,
            ridge=float(d["ridge"]),
            converged=bool(d["converged"]),
            n_iter=list(d["n_iter"]),
            deviance=list(d["deviance"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    def coef_table(self):
        import pandas as pd

        rows = []
        for k in range(self.n_causes):
            for j in range(self.cutpoints.n_intervals):
                rows.append({"k": k + 1, "term": f"interval[{j + 1}]", "estimate": self.intercepts[k, j]})
            for name, b in zip(self.coef_names, self.coef[k]):
                rows.append({"k": k + 1, "term": name, "estimate": b})
        return pd.DataFrame(rows)


def _penalized_loglik(a, b, j, Z, y, off, ridge):
    eta = a[j] + Z @ b + off
    # a wild trial step may overflow to -inf; step halving then rejects it
    with np.errstate(over="ignore"):
        return float(np.sum(y * eta - np.exp(eta)) - 0.5 * ridge * (a @ a + b @ b))


def _fit_one(j, Z, y, off, J, ridge, max_iter, tol):
    """Newton-Raphson (= IRLS for the canonical log link) with step halving."""
    p = Z.shape[1]
    events = np.bincount(j, weights=y, minlength=J)
    exposure = np.bincount(j, weights=np.exp(off), minlength=J)
    if ridge == 0:
        empty = np.flatnonzero(events == 0)
        if len(empty):
            raise GlmDivergenceError(
                f"interval(s) {(empty + 1).tolist()} contain no events: the MLE diverges; use ridge > 0"
            )
    a = np.full(J, np.log(max(events.sum(), 0.5) / exposure.sum()))
    b = np.zeros(p)
    ll = _penalized_loglik(a, b, j, Z, y, off, ridge)
    it = 0
    converged = False
    for it in range(1, max_iter + 1):
        mu = np.exp(a[j] + Z @ b + off)
        r = y - mu
        ga = np.bincount(j, weights=r, minlength=J) - ridge * a
        gb = Z.T @ r - ridge * b
        D = np.bincount(j, weights=mu, minlength=J) + ridge
        B = np.zeros((J, p))
        for c in range(p):
            B[:, c] = np.bincount(j, weights=mu * Z[:, c], minlength=J)
        Cm = (Z * mu[:, None]).T @ Z + ridge * np.eye(p)
        if np.any(D <= 0):
            raise GlmDivergenceError("interval without exposure; use ridge > 0")
        S = Cm - B.T @ (B / D[:, None])
        try:
            db = np.linalg.solve(S, gb - B.T @ (ga / D)) if p else np.zeros(0)
        except np.linalg.LinAlgError as e:
            raise GlmDivergenceError(f"singular design ({e}); use ridge > 0 or drop constant features") from None
        da = (ga - B @ db) / D
        step = 1.0
        for _ in range(30):
            a_new, b_new = a + step * da, b + step * db
            ll_new = _penalized_loglik(a_new, b_new, j, Z, y, off, ridge)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * abs(ll):
                break
            step *= 0.5
        else:
            raise GlmDivergenceError("step halving failed to increase the likelihood; use ridge > 0")
        a, b, ll = a_new, b_new, ll_new
        if np.max(np.abs(np.r_[a, b])) > 1e3:
            raise GlmDivergenceError("coefficients diverge (separation); use ridge > 0")
        mu = np.exp(a[j] + Z @ b + off)
        r = y - mu
        grad = np.r_[np.bincount(j, weights=r, minlength=J) - ridge * a, Z.T @ r - ridge * b]
        if np.linalg.norm(grad) < tol:
            converged = True
            break
    return a, b, converged, it


def poisson_deviance_total(y, mu) -> float:
    ylogy = np.where(y > 0, y * np.log(np.where(y > 0, y, 1.0) / mu), 0.0)
    return float(2.0 * np.sum(ylogy - (y - mu)))


def glm_fit(ped: PedDataset, ridge: float = 0.0, max_iter: int = 50, tol: float = 1e-8) -> PemGlm:
    """Fit the piece-wise exponential GLM to a PED (offset ``log(toff)``).

    ``ridge`` adds ``ridge/2 * ||beta||^2`` to the negative log-likelihood,
    interval intercepts included.
    """
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    J, K = ped.cutpoints.n_intervals, ped.n_causes
    Zall, names = glm_design(ped.X, ped.feature_schema)
    intercepts = np.zeros((K, J))
    coef = np.zeros((K, Zall.shape[1]))
    n_iter, dev, conv_all = [], [], True
    for k in range(1, K + 1):
        m = ped.transition == k
        j = ped.interval[m] - 1
        y = ped.label[m].astype(np.float64)
        off = np.log(ped.toff[m])
        a, b, conv, it = _fit_one(j, Zall[m], y, off, J, ridge, max_iter, tol)
        if not conv:
            warnings.warn(f"GLM for transition {k} did not reach gradient norm {tol} in {max_iter} iterations")
        intercepts[k - 1], coef[k - 1] = a, b
        n_iter.append(it)
        dev.append(poisson_deviance_total(y, np.exp(a[j] + Zall[m] @ b + off)))
        conv_all &= conv
    return PemGlm(intercepts, coef, names, ped.cutpoints, ped.feature_schema, K, ridge, conv_all, n_iter, dev)
