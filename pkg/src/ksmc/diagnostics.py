"""Statistical checks over completed runs: KS tests, RMSE, cross-run spread,
log-log rate fits."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .errors import ConfigError, InsufficientDataError


def kolmogorov_critical(significance: float) -> float:
    """Asymptotic constant ``c(a) = sqrt(-ln(a/2)/2)``; reject when ``D >= c/sqrt(n)``.

    Reasonable for n >= 35; conservative-ish below that.
    """
    if not 0.0 < significance < 1.0:
        raise ConfigError("significance must lie in (0, 1)")
    return math.sqrt(-0.5 * math.log(significance / 2.0))


def ks_statistic(samples, reference_cdf: Callable) -> float:
    """``sup_x |F_n(x) - F(x)|`` for a continuous reference CDF."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = x.size
    if n == 0:
        raise InsufficientDataError("KS statistic needs at least one sample")
    cdf = np.asarray(reference_cdf(x), dtype=float)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - cdf), np.max(cdf - (i - 1) / n)))


def ks_test(samples, reference_cdf: Callable, significance: float = 0.05):
    """One-sample Kolmogorov-Smirnov test; returns ``(statistic, passed)``."""
    samples = np.asarray(samples, dtype=float).ravel()
    if samples.size < 5:
        raise InsufficientDataError(f"KS test needs >= 5 samples, got {samples.size}")
    d = ks_statistic(samples, reference_cdf)
    return d, bool(d < kolmogorov_critical(significance) / math.sqrt(samples.size))


def windowed_innovation_ks(innovations, window: int = 50, significance: float = 0.05,
                           min_samples: int = 5):
    """Per-step KS statistic of standardised innovations against N(0, 1).

    At step ``i`` the trailing ``window`` innovations are tested channel by
    channel; the reported statistic is the worst channel and the step passes
    when every channel passes.  Steps with fewer than ``min_samples`` values
    give ``nan`` and are not counted.
    """
    nu = np.asarray(innovations, dtype=float)
    if nu.ndim == 1:
        nu = nu[:, None]
    steps = nu.shape[0]
    stat = np.full(steps, np.nan)
    passed = np.zeros(steps, dtype=bool)
    crit = kolmogorov_critical(significance)
    for i in range(steps):
        lo = max(0, i + 1 - window)
        block = nu[lo:i + 1]
        block = block[np.all(np.isfinite(block), axis=1)]
        if len(block) < min_samples:
            continue
        d = max(ks_statistic(block[:, c], stats.norm.cdf) for c in range(block.shape[1]))
        stat[i] = d
        passed[i] = d < crit / math.sqrt(len(block))
    return stat, passed


def rmse(a, b, axis=None):
    diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return np.sqrt(np.mean(diff ** 2, axis=axis))


def sampling_std(runs) -> np.ndarray:
    """Across-run standard deviation (ddof=1) of the estimate at each time."""
    runs = list(runs)
    if len(runs) < 2:
        raise InsufficientDataError("sampling std needs at least two runs")
    t0 = np.asarray(runs[0].times)
    for r in runs[1:]:
        if r.times.shape != t0.shape or not np.array_equal(r.times, t0):
            raise ConfigError("runs must share the same time grid")
    est = np.stack([r.estimates for r in runs])
    return np.std(est, axis=0, ddof=1)


@dataclass(frozen=True)
class RateFit:
    levels: tuple
    errors: tuple
    slope: float
    intercept: float
    r_squared: float

    def predict(self, level: float) -> float:
        return math.exp(self.intercept) * level ** self.slope


def rate_fit(levels: Sequence[float], errors: Sequence[float]) -> RateFit:
    """Least-squares fit of ``log(error) = intercept + slope * log(level)``."""
    lv = np.asarray(levels, dtype=float)
    er = np.asarray(errors, dtype=float)
    if lv.size < 3 or lv.shape != er.shape:
        raise InsufficientDataError("rate fit needs >= 3 matching levels and errors")
    steps = np.diff(lv)
    if not (np.all(steps > 0) or np.all(steps < 0)):
        raise ConfigError("levels must be strictly monotone")
    if np.any(er <= 0) or np.any(lv <= 0):
        raise ConfigError("levels and errors must be positive")
    x, y = np.log(lv), np.log(er)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (intercept + slope * x)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - float(np.sum(resid ** 2)) / ss_tot
    return RateFit(tuple(lv.tolist()), tuple(er.tolist()), float(slope), float(intercept), r2)


def convergence_time(times, estimate, reference, rel_tol: float) -> float:
    """First time after which ``|estimate - reference| <= rel_tol * |reference|``
    holds until the end of the run; ``nan`` if it never settles."""
    times = np.asarray(times, dtype=float)
    inside = np.abs(np.asarray(estimate) - reference) <= rel_tol * abs(reference)
    if not inside[-1]:
        return float("nan")
    outside = np.flatnonzero(~inside)
    return float(times[0] if outside.size == 0 else times[outside[-1] + 1])
