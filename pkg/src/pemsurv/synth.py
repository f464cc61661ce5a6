"""Synthetic survival data with time-varying effects.

Event times are drawn by inverting the cumulative hazard, with the true
log-hazard held constant on each cell of a fine time grid. Signal features:

* ``x0`` Rademacher on {-1, 1}
* ``x1`` uniform on [0, 10], ``x2`` uniform on [-pi, pi], ``x3`` uniform on [-1, 1]
* ``x4`` uniform on [0, 1], ``x5`` uniform on [0, 10] (competing-risks scenario only)

followed by ``n_noise`` U(0, 1) noise columns. Cause 1 (and the single event
of the ``tve`` scenario) has log-hazard

    g1(x, t) = 6 f0(x0, t) - 0.1 x1 + f2(x2, t) + f3(x3, t)

and cause 2 of ``tve_cr`` has ``g2(x, t) = f0(x0, t) + 2 x4 - 0.1 x5``, where

    f0(x0, t) = phi(t - 2 - x0) - 0.3        (bump whose peak moves with x0)
    f2(x2, t) = sin(x2) log(1 + t)
    f3(x3, t) = 3 x3 tanh(sqrt(t) - 1)

and ``phi`` is the standard normal density.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .predict import _cif
from .survdata import FeatureSchema, SurvivalDataset

SCENARIOS = ("tve", "tve_cr")
_BLOCK = 1024
_SQRT_2PI = np.sqrt(2.0 * np.pi)


def f0(x0, t):
    return np.exp(-0.5 * (t - 2.0 - x0) ** 2) / _SQRT_2PI - 0.3


def f2(x2, t):
    return np.sin(x2) * np.log1p(t)


def f3(x3, t):
    return 3.0 * x3 * np.tanh(np.sqrt(t) - 1.0)


def _g1(X, t):
    x0, x1, x2, x3 = (X[:, i, None] for i in range(4))
    return 6.0 * f0(x0, t) - 0.1 * x1 + f2(x2, t) + f3(x3, t)


def tve_log_hazard(X: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Single-event log-hazard, shape (n, len(t), 1)."""
    t = np.asarray(t, dtype=np.float64)[None, :]
    return _g1(X, t)[:, :, None]


def tve_cr_log_hazard(X: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Cause-specific log-hazards of the competing-risks scenario, shape (n, len(t), 2)."""
    t = np.asarray(t, dtype=np.float64)[None, :]
    g2 = f0(X[:, 0, None], t) + 2.0 * X[:, 4, None] - 0.1 * X[:, 5, None]
    return np.stack([_g1(X, t), g2], axis=2)


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings.

    ``censoring`` is the target censored fraction (None picks 0.33 for
    ``tve`` and 0.23 for ``tve_cr``; 0 disables random censoring).
    Follow-up ends administratively at ``t_max``. ``log_hazard`` replaces the
    built-in surfaces; it maps (X, t) to an array of shape (n, len(t)) or
    (n, len(t), K).
    """

    n: int = 1000
    scenario: str = "tve"
    n_noise: Optional[int] = None
    censoring: Optional[float] = None
    seed: int = 0
    resolution: float = 0.01
    t_max: float = 10.0
    log_hazard: Optional[Callable] = None

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        if not self.t_max > self.resolution:
            raise ValueError("t_max must exceed the grid resolution")
        if self.censoring is not None and not 0 <= self.censoring < 1:
            raise ValueError("censoring target must lie in [0, 1)")
        if self.n_noise is not None and self.n_noise < 0:
            raise ValueError("n_noise must be non-negative")

    @property
    def noise(self) -> int:
        if self.n_noise is not None:
            return self.n_noise
        return 20 if self.scenario == "tve" else 10

    @property
    def censoring_target(self) -> float:
        if self.censoring is not None:
            return self.censoring
        return 0.33 if self.scenario == "tve" else 0.23

    @property
    def n_signal(self) -> int:
        return 4 if self.scenario == "tve" else 6

    @property
    def n_causes(self) -> int:
        return 1 if self.scenario == "tve" else 2

    def default_log_hazard(self) -> Callable:
        return tve_log_hazard if self.scenario == "tve" else tve_cr_log_hazard

    def feature_names(self) -> list[str]:
        return [f"x{i}" for i in range(self.n_signal)] + [f"noise{i}" for i in range(self.noise)]


@dataclass(frozen=True, eq=False)
class SynthTruth:
    """Ground-truth hazard on the generator's time grid."""

    grid: np.ndarray
    log_hazard: Callable

    def cell_hazards(self, X) -> np.ndarray:
        """Hazard per grid cell, evaluated at the cell midpoint: (n, cells, K)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        mid = 0.5 * (self.grid[:-1] + self.grid[1:])
        lh = np.asarray(self.log_hazard(X, mid), dtype=np.float64)
        if lh.ndim == 2:
            lh = lh[:, :, None]
        return np.exp(lh)

    def cumulative_hazard(self, X, t) -> np.ndarray:
        """All-cause cumulative hazard (n, len(t)); constant hazard continues past the grid."""
        lam = self.cell_hazards(X).sum(axis=2)
        H = np.c_[np.zeros(len(lam)), np.cumsum(lam * np.diff(self.grid), axis=1)]
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        j = np.clip(np.searchsorted(self.grid, t, side="right") - 1, 0, len(self.grid) - 2)
        return H[:, j] + lam[:, j] * (t - self.grid[j])

    def survival(self, X, t) -> np.ndarray:
        return np.exp(-self.cumulative_hazard(X, t))

    def cif(self, X, t) -> np.ndarray:
        """Cumulative incidence (K, n, len(t))."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        return _cif(self.grid, self.cell_hazards(X), t)


@dataclass(frozen=True, eq=False)
class SynthResult:
    dataset: SurvivalDataset
    truth: SynthTruth
    censor_max: float
    censored_fraction: float


def _invert(H: np.ndarray, grid: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Smallest t with H(t) = e per row, by linear interpolation; inf if e > H(t_max)."""
    j = (H < e[:, None]).sum(axis=1)
    out = np.full(len(e), np.inf)
    inside = j < len(grid)
    jj = np.maximum(j[inside], 1)
    rows = np.flatnonzero(inside)
    h0, h1 = H[rows, jj - 1], H[rows, jj]
    frac = np.where(h1 > h0, (e[inside] - h0) / np.where(h1 > h0, h1 - h0, 1.0), 0.0)
    out[inside] = grid[jj - 1] + (grid[jj] - grid[jj - 1]) * frac
    return out


def _censored_fraction(T, U, c_max, t_max):
    C = np.minimum(U * c_max, t_max)
    return float(np.mean(C < T))


def _calibrate(T, U, target, t_max, iters=100):
    """Upper bound of the uniform censoring law that hits the target fraction."""
    floor = _censored_fraction(T, U, np.inf, t_max)
    if target <= floor:
        if target < floor:
            warnings.warn(
                f"censoring target {target:.3f} unattainable: administrative censoring alone gives {floor:.3f}",
                stacklevel=3,
            )
        return np.inf
    lo, hi = 0.0, 1.0
    while _censored_fraction(T, U, hi, t_max) > target and hi < 1e12:
        lo, hi = hi, hi * 2.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if _censored_fraction(T, U, mid, t_max) > target:
            lo = mid
        else:
            hi = mid
    achieved = _censored_fraction(T, U, hi, t_max)
    if abs(achieved - target) > 0.02:
        warnings.warn(f"censoring calibration reached {achieved:.3f} (target {target:.3f})", stacklevel=3)
    return hi


def generate(cfg: SynthConfig) -> SynthResult:
    """Draw a dataset. Each block of 1024 subjects uses its own RNG stream."""
    n_steps = int(np.ceil(cfg.t_max / cfg.resolution))
    grid = np.linspace(0.0, cfg.t_max, n_steps + 1)
    truth = SynthTruth(grid, cfg.log_hazard or cfg.default_log_hazard())
    p = cfg.n_signal + cfg.noise
    n_blocks = -(-cfg.n // _BLOCK)
    streams = np.random.SeedSequence(cfg.seed).spawn(n_blocks)
    X = np.empty((cfg.n, p))
    T = np.empty(cfg.n)
    cause = np.zeros(cfg.n, dtype=np.int64)
    U_c = np.empty(cfg.n)
    for b, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        lo, hi = b * _BLOCK, min(cfg.n, (b + 1) * _BLOCK)
        m = hi - lo
        xb = np.empty((m, p))
        xb[:, 0] = rng.choice([-1.0, 1.0], size=m)
        xb[:, 1] = rng.uniform(0.0, 10.0, m)
        xb[:, 2] = rng.uniform(-np.pi, np.pi, m)
        xb[:, 3] = rng.uniform(-1.0, 1.0, m)
        if cfg.n_signal == 6:
            xb[:, 4] = rng.uniform(0.0, 1.0, m)
            xb[:, 5] = rng.uniform(0.0, 10.0, m)
        xb[:, cfg.n_signal:] = rng.uniform(0.0, 1.0, (m, cfg.noise))
        lam = truth.cell_hazards(xb)
        K = lam.shape[2]
        latent = np.empty((m, K))
        for k in range(K):
            H = np.c_[np.zeros(m), np.cumsum(lam[:, :, k] * np.diff(grid), axis=1)]
            latent[:, k] = _invert(H, grid, rng.exponential(1.0, m))
        X[lo:hi] = xb
        T[lo:hi] = latent.min(axis=1)
        cause[lo:hi] = np.where(np.isfinite(T[lo:hi]), latent.argmin(axis=1) + 1, 0)
        U_c[lo:hi] = rng.uniform(0.0, 1.0, m)
    K = truth.cell_hazards(X[:1]).shape[2]
    target = cfg.censoring_target
    c_max = np.inf if target == 0 else _calibrate(T, U_c, target, cfg.t_max)
    C = np.minimum(U_c * c_max, cfg.t_max) if np.isfinite(c_max) else np.full(cfg.n, cfg.t_max)
    event = T <= C
    time = np.where(event, T, C)
    fs = FeatureSchema().extend(cfg.feature_names())
    ds = SurvivalDataset(
        subject_id=[str(i + 1) for i in range(cfg.n)],
        t_start=np.zeros(cfg.n),
        t_end=time,
        status=event.astype(np.int64),
        cause=np.where(event, cause, 0),
        X=X,
        feature_schema=fs,
        n_causes=K,
    )
    return SynthResult(ds, truth, float(c_max), float(np.mean(~event)))
