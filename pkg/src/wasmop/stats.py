"""Benchmark analysis math, dependency-free.

Three building blocks used by the report pipeline:

* ``upper_bound_95`` — the smallest memory level not exceeded for 95% of
  an observation window, with sample-and-hold time weighting.
* ``fit_linear`` / ``prediction_interval`` — ordinary least squares with
  the standard prediction interval for a future observation,
  ``ŷ0 ± t(1−α/2; n−2) · s · sqrt(1 + 1/n + (x0−x̄)²/Sxx)``.
* ``student_t_quantile`` — computed here (regularized incomplete beta
  continued fraction + bisection) so results do not depend on an
  environment-provided statistics facility.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from functools import lru_cache

__all__ = [
    "RegressionModel",
    "SlopeEstimate",
    "StatsError",
    "fit_linear",
    "prediction_interval",
    "slope_confidence_interval",
    "slope_with_ci",
    "student_t_cdf",
    "student_t_quantile",
    "upper_bound_95",
]


class StatsError(ValueError):
    """Invalid input to an analysis routine."""


# -- time-weighted upper bound -------------------------------------------------------


def upper_bound_95(
    series: Iterable[tuple[float, float]],
    window_end: float | None = None,
    *,
    fraction: float = 0.95,
) -> float:
    """Smallest value v such that usage ≤ v for at least ``fraction`` of
    the window's duration.

    Each sample holds from its timestamp until the next sample's; the
    final sample holds until ``window_end`` (default: the last
    timestamp).  Ties on flat plateaus resolve to the smallest
    qualifying value.  A zero-length window degenerates to the maximum.
    """
    pairs = [(float(t), float(v)) for t, v in series]
    if not pairs:
        raise StatsError("empty series")
    if not 0.0 < fraction <= 1.0:
        raise StatsError("fraction must be in (0, 1]")
    times = [t for t, _ in pairs]
    for earlier, later in zip(times, times[1:]):
        if later <= earlier:
            raise StatsError("timestamps must be strictly increasing")
    end = times[-1] if window_end is None else float(window_end)
    if end < times[-1]:
        raise StatsError("window_end precedes the last sample")

    total = end - times[0]
    if total <= 0.0:
        return max(v for _, v in pairs)
    durations = [b - a for a, b in zip(times, times[1:])]
    durations.append(end - times[-1])

    threshold = fraction * total
    slack = 1e-12 * total  # float-sum noise, far below any real sampling period
    accumulated = 0.0
    for value, duration in sorted(zip((v for _, v in pairs), durations)):
        accumulated += duration
        if accumulated >= threshold - slack:
            return value
    return max(v for _, v in pairs)  # unreachable barring pathological rounding


# -- ordinary least squares ----------------------------------------------------------


@dataclass(frozen=True, slots=True)
class RegressionModel:
    """OLS fit y = intercept + slope·x with residual scale for intervals."""

    slope: float
    intercept: float
    n: int
    s: float  # residual standard deviation, n−2 degrees of freedom
    mean_x: float
    sxx: float  # Σ(xi − x̄)²
    r_squared: float = float("nan")

    def predict(self, x: float) -> float:
        return self.intercept + self.slope * x


def fit_linear(points: Sequence[tuple[float, float]]) -> RegressionModel:
    pts = [(float(x), float(y)) for x, y in points]
    n = len(pts)
    if n < 3:
        raise StatsError("need at least 3 points to estimate residual variance")
    mean_x = math.fsum(x for x, _ in pts) / n
    mean_y = math.fsum(y for _, y in pts) / n
    sxx = math.fsum((x - mean_x) ** 2 for x, _ in pts)
    if sxx <= 0.0:
        raise StatsError("need at least two distinct x values")
    sxy = math.fsum((x - mean_x) * (y - mean_y) for x, y in pts)
    slope = sxy / sxx
    intercept = mean_y - slope * mean_x
    ss_res = math.fsum((y - (intercept + slope * x)) ** 2 for x, y in pts)
    ss_tot = math.fsum((y - mean_y) ** 2 for _, y in pts)
    s = math.sqrt(max(ss_res, 0.0) / (n - 2))
    r_squared = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return RegressionModel(slope, intercept, n, s, mean_x, sxx, r_squared)


# -- Student t -----------------------------------------------------------------------

_CDF_TOLERANCE = 1e-6


def _beta_continued_fraction(a: float, b: float, x: float) -> float:
    """Lentz's continued fraction for the incomplete beta function."""
    max_iterations = 300
    eps = 3e-14
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iterations + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise StatsError("incomplete beta continued fraction failed to converge")


def _regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_continued_fraction(a, b, x) / a
    return 1.0 - front * _beta_continued_fraction(b, a, 1.0 - x) / b


def student_t_cdf(t: float, dof: int) -> float:
    if dof < 1:
        raise StatsError("degrees of freedom must be at least 1")
    x = dof / (dof + t * t)
    tail = 0.5 * _regularized_incomplete_beta(dof / 2.0, 0.5, x)
    return 1.0 - tail if t >= 0.0 else tail


@lru_cache(maxsize=256)
def student_t_quantile(p: float, dof: int) -> float:
    """Inverse t CDF by bracket expansion + bisection (CDF tolerance 1e−6)."""
    if dof < 1:
        raise StatsError("degrees of freedom must be at least 1")
    if not 0.0 < p < 1.0:
        raise StatsError("probability must be strictly inside (0, 1)")
    if p == 0.5:
        return 0.0
    if p < 0.5:
        return -student_t_quantile(1.0 - p, dof)
    low, high = 0.0, 1.0
    while student_t_cdf(high, dof) < p:
        high *= 2.0
        if high > 1e12:
            raise StatsError("quantile bracket expansion failed")
    while high - low > _CDF_TOLERANCE * 1e-3 * max(1.0, high):
        mid = (low + high) / 2.0
        if student_t_cdf(mid, dof) < p:
            low = mid
        else:
            high = mid
    return (low + high) / 2.0


# -- intervals -----------------------------------------------------------------------


def _two_sided_t(model: RegressionModel, confidence: float) -> float:
    if not 0.0 < confidence < 1.0:
        raise StatsError("confidence must be strictly inside (0, 1)")
    if model.n <= 2:
        raise StatsError("intervals require a model with n > 2")
    if model.sxx <= 0.0 or model.s < 0.0:
        raise StatsError("degenerate model")
    alpha = 1.0 - confidence
    return student_t_quantile(1.0 - alpha / 2.0, model.n - 2)


def prediction_interval(
    model: RegressionModel, x0: float, confidence: float = 0.95
) -> tuple[float, float]:
    """Range expected to contain a single future observation at x0."""
    t = _two_sided_t(model, confidence)
    center = model.predict(x0)
    half_width = t * model.s * math.sqrt(
        1.0 + 1.0 / model.n + (x0 - model.mean_x) ** 2 / model.sxx
    )
    return center - half_width, center + half_width


def slope_confidence_interval(
    model: RegressionModel, confidence: float = 0.95
) -> tuple[float, float]:
    t = _two_sided_t(model, confidence)
    standard_error = model.s / math.sqrt(model.sxx)
    return model.slope - t * standard_error, model.slope + t * standard_error


@dataclass(frozen=True, slots=True)
class SlopeEstimate:
    """Per-unit increase with a two-sided confidence interval."""

    slope: float
    low: float
    high: float
    levels: int


def slope_with_ci(
    models: Sequence[tuple[float, RegressionModel]], confidence: float = 0.95
) -> SlopeEstimate:
    """Slope of per-operator memory versus ballast level.

    ``models`` pairs each ballast level with the bound-versus-operator-count
    fit at that level; the regression runs over (level, fitted slope).
    With exactly two levels the slope is determined but its confidence
    interval is unbounded (zero residual degrees of freedom).
    """
    pairs = [(float(level), model.slope) for level, model in models]
    if len({x for x, _ in pairs}) < 2:
        raise StatsError("need at least two distinct ballast levels")
    if len(pairs) == 2:
        (x1, y1), (x2, y2) = sorted(pairs)
        slope = (y2 - y1) / (x2 - x1)
        return SlopeEstimate(slope, -math.inf, math.inf, 2)
    fit = fit_linear(pairs)
    low, high = slope_confidence_interval(fit, confidence)
    return SlopeEstimate(fit.slope, low, high, len(pairs))
