"""Small datasets and independent reference implementations used by the tests."""
from dataclasses import dataclass

import numpy as np

from pemsurv.ped import CutPoints
from pemsurv.survdata import FeatureSchema, SubjectSpan, SurvivalDataset


def three_subject_dataset() -> SurvivalDataset:
    """Three subjects, two causes: event k=2 at 1.3, censored at 0.5, event k=1 at 2.7."""
    fs = FeatureSchema(("x",), ("numeric",))
    spans = [
        SubjectSpan("1", 0.0, 1.3, 1, 2, (0.5,)),
        SubjectSpan("2", 0.0, 0.5, 0, None, (1.5,)),
        SubjectSpan("3", 0.0, 2.7, 1, 1, (-1.0,)),
    ]
    return SurvivalDataset.from_spans(spans, fs, n_causes=2)


def random_dataset(rng, n, n_causes=1, p=2, truncation=False, tvf=False, integer_times=False):
    """Random right-censored (optionally left-truncated, time-varying) data."""
    ids, t0, t1, st, cs, X = [], [], [], [], [], []
    for i in range(n):
        entry = float(rng.uniform(0, 1)) if truncation and rng.random() < 0.5 else 0.0
        if integer_times:
            exit_ = entry + float(rng.integers(1, 5))
        else:
            exit_ = entry + float(rng.exponential(1.0)) + 1e-3
        event = int(rng.random() < 0.7)
        cause = int(rng.integers(1, n_causes + 1)) if event else 0
        x = rng.normal(size=p)
        if tvf and rng.random() < 0.5:
            mid = entry + (exit_ - entry) * float(rng.uniform(0.2, 0.8))
            bounds = [(entry, mid), (mid, exit_)]
        else:
            bounds = [(entry, exit_)]
        for s, (a, b) in enumerate(bounds):
            last = s == len(bounds) - 1
            ids.append(str(i + 1))
            t0.append(a)
            t1.append(b)
            st.append(event if last else 0)
            cs.append(cause if last else 0)
            X.append(x + s)
    fs = FeatureSchema(tuple(f"x{i}" for i in range(p)), ("numeric",) * p)
    return SurvivalDataset(ids, t0, t1, st, cs, np.array(X, dtype=float).reshape(len(X), p), fs, n_causes)


def survival_loglik_reference(ds: SurvivalDataset, kappa, lam) -> float:
    """Survival log-likelihood sum_i [delta_i log lambda(t_i) - int_entry^t_i lambda(u) du]
    for a piece-wise constant, feature-free hazard ``lam`` (J,) or (J, K), computed
    subject by subject from the raw data."""
    lam = np.asarray(lam, dtype=float)
    if lam.ndim == 1:
        lam = lam[:, None]
    total = 0.0
    for r in range(len(ds)):
        a, b = ds.t_start[r], ds.t_end[r]
        for j in range(1, len(kappa)):
            lo, hi = max(a, kappa[j - 1]), min(b, kappa[j])
            if hi > lo:
                total -= lam[j - 1].sum() * (hi - lo)
        if ds.status[r] == 1:
            j = next(j for j in range(1, len(kappa)) if kappa[j - 1] < b <= kappa[j])
            k = ds.cause[r] if ds.n_causes > 1 else 1
            total += np.log(lam[j - 1, k - 1])
    return total


def km_bruteforce(time, event, t):
    """Product over distinct event times s <= t of (1 - d(s)/n(s))."""
    time, event = np.asarray(time, float), np.asarray(event, bool)
    s = 1.0
    for u in np.unique(time[event]):
        if u <= t:
            d = np.sum((time == u) & event)
            n_risk = np.sum(time >= u)
            s *= 1.0 - d / n_risk
    return s


def _g_right(tc, cens, t):
    """Censoring survival G(t): product over censoring times s <= t."""
    g = 1.0
    for s in np.unique(tc[cens]):
        if s <= t:
            g *= 1 - np.sum((tc == s) & cens) / np.sum(tc >= s)
    return g


def _g_left(tc, cens, t):
    g = 1.0
    for s in np.unique(tc[cens]):
        if s < t:
            g *= 1 - np.sum((tc == s) & cens) / np.sum(tc >= s)
    return g


def brier_reference(time, event, pred, t, tr_time, tr_event, cause=None):
    """Subject-by-subject IPCW Brier score."""
    cens = tr_event == 0
    total = 0.0
    for i in range(len(time)):
        if time[i] <= t and event[i] > 0:
            hit = event[i] > 0 if cause is None else event[i] == cause
            loss = pred[i] ** 2 if hit else (1 - pred[i]) ** 2
            total += loss / _g_left(tr_time, cens, time[i])
        elif time[i] > t:
            total += (1 - pred[i]) ** 2 / _g_right(tr_time, cens, t)
    return total / len(time)


def cindex_reference(time, event, risk, tau, tr_time, tr_event, cause=None):
    cens = tr_event == 0
    interest = (event > 0) if cause is None else (event == cause)
    num = den = 0.0
    for i in range(len(time)):
        if not (interest[i] and time[i] <= tau):
            continue
        w = _g_left(tr_time, cens, time[i]) ** -2
        for l in range(len(time)):
            if l == i:
                continue
            if time[l] > time[i] or (time[l] == time[i] and not interest[l]):
                den += w
                num += w * (1.0 if risk[i] > risk[l] else 0.5 if risk[i] == risk[l] else 0.0)
    return num / den


@dataclass
class TableModel:
    """Feature-free model with a fixed (J, K) hazard table."""

    cutpoints: CutPoints
    table: np.ndarray

    @property
    def n_causes(self):
        return self.table.shape[1]

    def interval_hazards(self, X):
        return np.repeat(self.table[None], len(np.atleast_2d(X)), axis=0)


def random_table_model(rng, K=2, J=None):
    J = J or int(rng.integers(1, 8))
    kappa = np.r_[0.0, np.cumsum(rng.uniform(0.1, 1.5, J))]
    return TableModel(CutPoints(kappa), rng.uniform(0.0, 2.0, (J, K)))


def _simpson(f, a, b, n=2000):
    x = np.linspace(a, b, 2 * n + 1)
    y = f(x)
    h = (b - a) / (2 * n)
    return h / 3 * (y[0] + y[-1] + 4 * y[1:-1:2].sum() + 2 * y[2:-1:2].sum())


def quadrature_oracle(model, t):
    """Survival and incidence at t by integrating the hazard interval by interval."""
    kappa, lam = model.cutpoints.kappa, model.table
    lo = kappa[:-1]
    hi = np.r_[kappa[1:-1], np.inf]
    H, F = 0.0, np.zeros(lam.shape[1])
    for j in range(len(lo)):
        if t <= lo[j]:
            break
        end = min(t, hi[j])
        total = lam[j].sum()
        H0 = H
        for k in range(lam.shape[1]):
            F[k] += _simpson(lambda u: lam[j, k] * np.exp(-(H0 + total * (u - lo[j]))), lo[j], end)
        H += _simpson(lambda u: np.full_like(u, total), lo[j], end)
    return np.exp(-H), F


def ibs_fine_grid(time, event, pred_fn, tau, tr_time, tr_event, n_grid=1000):
    """Trapezoid rule of the reference Brier score on an equispaced grid over [0, tau]."""
    grid = np.linspace(0, tau, n_grid)
    bs = np.array([brier_reference(time, event, pred_fn([u])[:, 0], u, tr_time, tr_event) for u in grid])
    return np.sum((bs[1:] + bs[:-1]) / 2 * np.diff(grid)) / tau
