"""Survival and cumulative incidence curves from piece-wise constant hazards.

Beyond the last cut-point the last interval's hazard is carried forward;
such evaluation times are reported by ``beyond_followup``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ped import CutPoints


_BLOCK_CELLS = 4_000_000


def _exposure(kappa: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Time spent in each interval up to ``t``: shape (len(t), J); last interval is open-ended."""
    lo = kappa[:-1]
    hi = np.r_[kappa[1:-1], np.inf]
    return np.clip(t[:, None] - lo[None, :], 0.0, None).clip(max=(hi - lo)[None, :])


def _incidence_factor(x: np.ndarray) -> np.ndarray:
    """(1 - exp(-x)) / x with its limit 1 at x = 0."""
    out = np.ones_like(x)
    nz = x != 0
    out[nz] = -np.expm1(-x[nz]) / x[nz]
    return out


@dataclass(frozen=True, eq=False)
class SurvivalCurve:
    cutpoints: CutPoints
    hazards: np.ndarray  # (J,)

    def cumulative_hazard(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        return _exposure(self.cutpoints.kappa, t) @ self.hazards

    def __call__(self, t) -> np.ndarray:
        return np.exp(-self.cumulative_hazard(t))

    def beyond_followup(self, t) -> np.ndarray:
        return np.atleast_1d(np.asarray(t, dtype=np.float64)) > self.cutpoints.max_time


@dataclass(frozen=True, eq=False)
class CifCurve:
    cutpoints: CutPoints
    hazards: np.ndarray  # (J, K)

    @property
    def n_causes(self) -> int:
        return self.hazards.shape[1]

    def survival(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        return np.exp(-_exposure(self.cutpoints.kappa, t) @ self.hazards.sum(axis=1))

    def __call__(self, t) -> np.ndarray:
        """Cumulative incidence per cause, shape (K, len(t))."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        return _cif(self.cutpoints.kappa, self.hazards[None], t)[:, 0, :]

    def beyond_followup(self, t) -> np.ndarray:
        return np.atleast_1d(np.asarray(t, dtype=np.float64)) > self.cutpoints.max_time


def _cif(kappa: np.ndarray, hazards: np.ndarray, t: np.ndarray) -> np.ndarray:
    """CIF for hazards of shape (n, J, K) at times t -> (K, n, m).

    Within interval j with total hazard L_j, the cause-k increment up to time
    u is S(kappa_{j-1}) * lam_jk * dt * (1 - exp(-L_j dt)) / (L_j dt).
    """
    n, J, K = hazards.shape
    dt = _exposure(kappa, t)  # (m, J)
    widths = np.diff(kappa)[:-1]
    out = np.empty((K, n, len(t)))
    block = max(1, _BLOCK_CELLS // max(1, len(t) * J))
    for lo in range(0, n, block):
        lam = hazards[lo:lo + block]
        total = lam.sum(axis=2)  # (b, J)
        s_start = np.exp(-np.cumsum(np.c_[np.zeros(len(total)), total[:, :-1] * widths[None, :]], axis=1))
        x = total[:, None, :] * dt[None, :, :]  # (b, m, J)
        base = s_start[:, None, :] * dt[None, :, :] * _incidence_factor(x)
        out[:, lo:lo + block, :] = np.einsum("bmj,bjk->kbm", base, lam)
    return out


def _hazards(model, X) -> np.ndarray:
    if not hasattr(model, "interval_hazards"):
        raise TypeError(f"{type(model).__name__} does not provide piece-wise hazards")
    return model.interval_hazards(X)


def survival_curve(model, x, cause=None) -> SurvivalCurve:
    """Survival curve of one subject with constant features ``x``.

    ``cause=None`` uses the hazard summed over all transitions (all-cause
    survival); an integer keeps that transition only.
    """
    lam = _hazards(model, np.asarray(x, dtype=np.float64)[None, :])[0]  # (J, K)
    lam = lam.sum(axis=1) if cause is None else lam[:, cause - 1]
    return SurvivalCurve(model.cutpoints, lam)


def cif_curves(model, x) -> CifCurve:
    if model.n_causes < 2:
        raise ValueError("cumulative incidence curves need a model with at least two causes")
    lam = _hazards(model, np.asarray(x, dtype=np.float64)[None, :])[0]
    return CifCurve(model.cutpoints, lam)


def predict_survival(model, X, times) -> np.ndarray:
    """All-cause survival for every row of ``X`` at ``times``: shape (n, m)."""
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    if not hasattr(model, "interval_hazards"):
        return model.predict_survival(X, times)
    lam = _hazards(model, X).sum(axis=2)  # (n, J)
    return np.exp(-lam @ _exposure(model.cutpoints.kappa, times).T)


def predict_cif(model, X, times) -> np.ndarray:
    """Cumulative incidence per cause: shape (K, n, m)."""
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    if not hasattr(model, "interval_hazards"):
        return model.predict_cif(X, times)
    return _cif(model.cutpoints.kappa, _hazards(model, X), times)


def beyond_followup(model, times) -> np.ndarray:
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    if not hasattr(model, "cutpoints"):
        return np.zeros(len(times), dtype=bool)
    return times > model.cutpoints.max_time
