"""Empirical CDF, generalized-inverse quantile and bootstrap intervals."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np


class EstimationError(ValueError):
    pass


@dataclass(frozen=True)
class QuantileEstimate:
    """Point estimate of an output quantile with an optional interval."""

    alpha: float
    value: float
    n: int
    ci: tuple | None = None  # (lower, upper, level, replicates)

    @property
    def half_width(self):
        if self.ci is None:
            return 0.0
        return 0.5 * (self.ci[1] - self.ci[0])


def _check(sample, alpha=None):
    y = np.asarray(sample, dtype=float).ravel()
    if y.size == 0:
        raise EstimationError("sample is empty")
    if alpha is not None and not 0.0 < alpha < 1.0:
        raise EstimationError(f"alpha must lie in (0, 1), got {alpha}")
    return y


def order_index(alpha, n):
    """Zero-based index of the ``ceil(alpha * n)``-th order statistic.

    ``alpha`` is read as the decimal it prints as, so ``0.1 * 300000`` gives
    exactly 30000 rather than one more through binary rounding.
    """
    k = math.ceil(Fraction(repr(float(alpha))) * n)
    return max(k, 1) - 1


def empirical_quantile(sample, alpha):
    """Generalized inverse ``inf{y : G_n(y) >= alpha}`` of the empirical CDF.

    Examples
    --------
    >>> empirical_quantile([5, 1, 4, 2, 3], 0.5)
    3.0
    """
    y = _check(sample, alpha)
    k = order_index(alpha, y.size)
    return float(np.partition(y, k)[k])


def empirical_cdf(sample, y):
    """Right-continuous empirical distribution function at ``y``."""
    s = np.sort(_check(sample))
    return np.searchsorted(s, np.asarray(y, dtype=float), side="right") / s.size


def bootstrap_ci(sample, alpha, level=0.95, replicates=500, rng=None, sorted_sample=None):
    """Percentile bootstrap interval of the empirical quantile.

    A resample's ``k``-th order statistic is the sorted sample at index
    ``ceil(n * B) - 1`` with ``B ~ Beta(k, n - k + 1)``, which has the same
    distribution as resampling ``n`` values and sorting them. This keeps
    the cost independent of ``n``.

    The interval is widened to contain the point estimate if needed.
    """
    if replicates < 100:
        raise EstimationError("at least 100 bootstrap replicates are required")
    if not 0.0 < level < 1.0:
        raise EstimationError("level must lie in (0, 1)")
    s = np.sort(_check(sample, alpha)) if sorted_sample is None else sorted_sample
    n = s.size
    rng = np.random.default_rng() if rng is None else rng
    k = order_index(alpha, n) + 1
    b = rng.beta(k, n - k + 1, size=replicates)
    idx = np.clip(np.ceil(n * b).astype(np.int64), 1, n) - 1
    reps = np.sort(s[idx])
    lo = reps[order_index((1.0 - level) / 2.0, replicates)]
    hi = reps[order_index((1.0 + level) / 2.0, replicates)]
    est = s[k - 1]
    return float(min(lo, est)), float(max(hi, est))


def estimate_quantile(sample, alpha, level=0.95, replicates=500, rng=None):
    """Quantile estimate together with its bootstrap interval."""
    s = np.sort(_check(sample, alpha))
    value = float(s[order_index(alpha, s.size)])
    if replicates:
        lo, hi = bootstrap_ci(s, alpha, level, replicates, rng, sorted_sample=s)
        ci = (lo, hi, level, replicates)
    else:
        ci = None
    return QuantileEstimate(alpha, value, s.size, ci)
