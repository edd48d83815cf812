"""Small numerical helpers: quantiles, streaming moments, jackknife."""

from __future__ import annotations

import math

import numpy as np
from scipy import special

from .exceptions import InvalidLevel


def check_level(beta: float) -> float:
    """Validate a miss-probability ``beta`` in (0, 1) and return it as float."""
    beta = float(beta)
    if not 0.0 < beta < 1.0 or math.isnan(beta):
        raise InvalidLevel(f"beta must lie in (0, 1), got {beta!r}")
    return beta


def normal_quantile(p):
    """Inverse of the standard normal CDF."""
    return special.ndtri(p)


def normal_cdf(x):
    return special.ndtr(x)


def two_sided_z(beta: float) -> float:
    """Upper ``beta/2`` critical value of the standard normal, ``z_{1-beta/2}``."""
    beta = check_level(beta)
    return float(-special.ndtri(beta / 2.0))


def t_quantile(p: float, df: float) -> float:
    """Quantile of Student's t with ``df`` degrees of freedom.

    Uses the regularized incomplete beta inverse: for ``p < 1/2`` the
    quantile is ``-sqrt(df * (1 - x) / x)`` with ``x = I^{-1}_{2p}(df/2, 1/2)``.
    """
    p = float(p)
    if not 0.0 < p < 1.0:
        raise InvalidLevel(f"p must lie in (0, 1), got {p!r}")
    if df <= 0:
        raise ValueError("df must be positive")
    if p == 0.5:
        return 0.0
    tail = min(p, 1.0 - p)
    x = special.betaincinv(0.5 * df, 0.5, 2.0 * tail)
    t = math.sqrt(df * (1.0 - x) / x)
    return -t if p < 0.5 else t


class RunningMoments:
    """Welford accumulator for mean and variance, mergeable (Chan et al.)."""

    __slots__ = ("n", "mean", "m2")

    def __init__(self):
        self.n = 0
        self.mean = 0.0
        self.m2 = 0.0

    def push(self, x: float) -> None:
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def extend(self, xs) -> "RunningMoments":
        for x in xs:
            self.push(float(x))
        return self

    def merge(self, other: "RunningMoments") -> "RunningMoments":
        out = RunningMoments()
        out.n = self.n + other.n
        if out.n == 0:
            return out
        delta = other.mean - self.mean
        out.mean = self.mean + delta * other.n / out.n
        out.m2 = self.m2 + other.m2 + delta * delta * self.n * other.n / out.n
        return out

    @property
    def variance(self) -> float:
        """Unbiased sample variance (``nan`` below two observations)."""
        if self.n < 2:
            return float("nan")
        return self.m2 / (self.n - 1)


def jackknife_sd(x) -> tuple[float, float]:
    """Sample standard deviation of ``x`` and its jackknife standard error."""
    x = np.asarray(x, dtype=float)
    m = x.size
    if m < 3:
        raise ValueError("need at least 3 values for a jackknife")
    total = x.sum()
    sq = np.sum(x * x)
    loo_mean = (total - x) / (m - 1)
    loo_var = (sq - x * x - (m - 1) * loo_mean**2) / (m - 2)
    loo_sd = np.sqrt(np.maximum(loo_var, 0.0))
    se = math.sqrt((m - 1) / m * np.sum((loo_sd - loo_sd.mean()) ** 2))
    return float(np.std(x, ddof=1)), se
