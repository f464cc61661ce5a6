"""IPCW Brier score, integrated Brier score and truncated concordance.

Subjects are given as ``time`` and ``event`` arrays, where ``event`` holds
the cause code (0 = censored). Predictions are the probability of being free
of the event of interest: S(t) for single-event data, 1 - F_k(t) for cause k.
Censoring weights come from a Kaplan-Meier fit of the censoring times
(``censoring_km``), normally on the training data.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .baselines import KmCurve, km_estimate
from .predict import beyond_followup, predict_cif, predict_survival
from .survdata import SurvivalDataset

QUANTILES = (0.25, 0.5, 0.75)
QUANTILE_LABELS = ("Q25", "Q50", "Q75")


class DegenerateWeightError(ValueError):
    pass


def censoring_km(time, event) -> KmCurve:
    """KM estimate G of the censoring distribution (censored = no event of any cause)."""
    return km_estimate(time, np.asarray(event) == 0)


def quantile_horizons(time, event, q: Sequence[float] = QUANTILES) -> np.ndarray:
    """Empirical quantiles (linear interpolation) of the observed event times."""
    ev = np.asarray(time, dtype=np.float64)[np.asarray(event) > 0]
    if len(ev) == 0:
        raise ValueError("no events: evaluation horizons are undefined")
    return np.quantile(ev, q)


def _brier_terms(time, event, pred, t, G: KmCurve, cause, left=False) -> np.ndarray:
    """Per-subject IPCW Brier contributions at ``t`` (or its left limit ``t-``)."""
    is_ev = event > 0
    interest = is_ev if cause is None else event == cause
    before = time < t if left else time <= t
    g_event = G.left(time)
    g_t = float(G.left(t) if left else G(t))
    need_ev = before & is_ev
    if np.any(g_event[need_ev] <= 0):
        raise DegenerateWeightError(f"censoring weight degenerate at t={time[need_ev][g_event[need_ev] <= 0][0]}")
    after = ~before
    if after.any() and g_t <= 0:
        raise DegenerateWeightError(f"censoring weight degenerate at t={t}")
    out = np.zeros(len(time))
    hit = need_ev & interest
    other = need_ev & ~interest
    out[hit] = pred[hit] ** 2 / g_event[hit]
    out[other] = (1.0 - pred[other]) ** 2 / g_event[other]
    out[after] = (1.0 - pred[after]) ** 2 / g_t if after.any() else 0.0
    return out


def brier(time, event, pred, t: float, censor: KmCurve, cause: Optional[int] = None) -> float:
    """IPCW Brier score at ``t``; subjects censored by ``t`` contribute 0."""
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event)
    pred = np.asarray(pred, dtype=np.float64)
    if np.any((pred < 0) | (pred > 1)):
        raise ValueError("predicted probabilities must lie in [0, 1]")
    return float(np.mean(_brier_terms(time, event, pred, t, censor, cause)))


def ibs(time, event, pred_fn: Callable, tau: float, censor: KmCurve, cause: Optional[int] = None,
        n_fill: int = 200) -> float:
    """Integrated Brier score over [0, tau], divided by tau.

    ``pred_fn(times)`` returns predictions of shape (n, len(times)). The grid
    holds 0, tau, the test times, the censoring-KM jumps below tau and
    ``n_fill`` equispaced points. The weights only jump at the first three
    kinds of point, so the trapezoid rule (right value at the segment start,
    left limit at its end) only has to absorb the curvature of the predictions.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event)
    pts = np.r_[np.linspace(0.0, tau, n_fill + 2), time[time <= tau], censor.times[censor.times <= tau]]
    grid = np.unique(pts)
    pred = np.asarray(pred_fn(grid), dtype=np.float64)
    total = 0.0
    for a in range(len(grid) - 1):
        u0, u1 = grid[a], grid[a + 1]
        b0 = np.mean(_brier_terms(time, event, pred[:, a], u0, censor, cause))
        b1 = np.mean(_brier_terms(time, event, pred[:, a + 1], u1, censor, cause, left=True))
        total += 0.5 * (b0 + b1) * (u1 - u0)
    return float(total / tau)


def cindex_td(time, event, risk, tau: float, censor: KmCurve, cause: Optional[int] = None) -> float:
    """IPCW concordance truncated at ``tau``.

    A pair (i, l) is comparable when i has an event of interest at
    ``t_i <= tau`` and either ``t_l > t_i`` or ``t_l == t_i`` with l not
    having an event of interest. Pairs carry weight ``G(t_i-)^-2``; i should
    have the higher risk, ties count one half.
    """
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event)
    risk = np.asarray(risk, dtype=np.float64)
    interest = event > 0 if cause is None else event == cause
    idx = np.flatnonzero(interest & (time <= tau))
    num = den = 0.0
    for lo in range(0, len(idx), 256):
        i = idx[lo:lo + 256]
        g = censor.left(time[i])
        if np.any(g <= 0):
            raise DegenerateWeightError(f"censoring weight degenerate at t={time[i][g <= 0][0]}")
        w = 1.0 / g**2
        ti, tl = time[i][:, None], time[None, :]
        comp = (tl > ti) | ((tl == ti) & ~interest[None, :])
        ri, rl = risk[i][:, None], risk[None, :]
        conc = (ri > rl) + 0.5 * (ri == rl)
        num += float(np.sum(w[:, None] * comp * conc))
        den += float(np.sum(w[:, None] * comp))
    if den == 0:
        raise ValueError("no comparable pairs for the concordance index")
    return num / den


@dataclass
class MetricsReport:
    """Metrics per cause and horizon; values on the probability scale."""

    rows: list[dict] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def value(self, metric: str, horizon: str, cause: int = 1) -> float:
        for r in self.rows:
            if r["cause"] == cause and r["horizon"] == horizon:
                return r[metric]
        raise KeyError((metric, horizon, cause))

    def to_dict(self, percent: bool = True) -> dict:
        scale = 100.0 if percent else 1.0
        rows = []
        for r in self.rows:
            r = dict(r)
            for m in ("brier", "ibs", "cindex"):
                if r.get(m) is not None:
                    r[m] = r[m] * scale
            rows.append(r)
        return {"scale": "percent" if percent else "probability", "metrics": rows, "diagnostics": self.diagnostics}


def subject_arrays(ds: SurvivalDataset):
    """(time, event-cause, baseline features) per subject."""
    st = ds.subject_table()
    X = st[list(ds.feature_schema.names)].to_numpy(np.float64) if len(ds.feature_schema) else np.zeros((len(st), 0))
    event = np.where(st["status"].to_numpy() == 1, st["cause"].to_numpy(), 0)
    return st["time"].to_numpy(np.float64), event.astype(np.int64), X


def evaluate(model, train: SurvivalDataset, test: SurvivalDataset, horizons=None) -> MetricsReport:
    """Brier, IBS and C-index at the test-set event-time quartiles (or given horizons).

    Test subjects are predicted from their first-span features.
    """
    t_tr, e_tr, _ = subject_arrays(train)
    time, event, X = subject_arrays(test)
    G = censoring_km(t_tr, e_tr)
    if horizons is None:
        taus = quantile_horizons(time, event)
        labels = QUANTILE_LABELS
    else:
        taus = np.asarray(horizons, dtype=np.float64)
        labels = tuple(f"t={t:g}" for t in taus)
    K = getattr(model, "n_causes", 1)
    report = MetricsReport()
    report.diagnostics = {
        "horizons": dict(zip(labels, taus.tolist())),
        "censoring_surv_at_horizon": dict(zip(labels, G(taus).tolist())),
        "censored_fraction_train": float(np.mean(e_tr == 0)),
        "censored_fraction_test": float(np.mean(event == 0)),
        "extrapolated_horizons": [lab for lab, b in zip(labels, beyond_followup(model, taus)) if b],
    }
    for k in range(1, K + 1):
        if K == 1:
            def pred_fn(ts):
                return predict_survival(model, X, ts)
            cause = None
        else:
            def pred_fn(ts, k=k):
                return 1.0 - predict_cif(model, X, ts)[k - 1]
            cause = k
        at_tau = np.clip(pred_fn(taus), 0.0, 1.0)
        for lab, tau, col in zip(labels, taus, at_tau.T):
            row = {"cause": k, "horizon": lab, "tau": float(tau)}
            row["brier"] = brier(time, event, col, tau, G, cause)
            row["ibs"] = ibs(time, event, lambda ts: np.clip(pred_fn(ts), 0.0, 1.0), tau, G, cause)
            try:
                row["cindex"] = cindex_td(time, event, 1.0 - col, tau, G, cause)
            except ValueError:
                row["cindex"] = None
            report.rows.append(row)
    return report
