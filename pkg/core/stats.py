"""
Statistics used by the reports: mean +/- SE, Welch's t-test, least squares
with R^2, and context-efficiency ratios.

The Student-t tail comes from the regularized incomplete beta function,
evaluated with Lentz's continued fraction and the usual symmetry split.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from typing import NamedTuple

import numpy as np

from core.constants import BETA_CF_MAX_ITER, BETA_CF_TOLERANCE
from core.exceptions import DegenerateVariance, InsufficientSamples, SingularFit

_TINY = 1e-300


class WelchResult(NamedTuple):
    t: float
    df: float
    p_two_sided: float


class FitResult(NamedTuple):
    slope: float
    intercept: float
    r_squared: float


# ---------------------------------------------------------------------------
# Incomplete beta / Student-t
# ---------------------------------------------------------------------------


def _beta_cf(a: float, b: float, x: float) -> float:
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, BETA_CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < BETA_CF_TOLERANCE:
            return h
    raise ArithmeticError(f"incomplete beta did not converge (a={a}, b={b}, x={x})")


def regularized_beta(x: float, a: float, b: float) -> float:
    """I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    if df <= 0:
        raise ValueError("df must be positive")
    if math.isinf(t):
        return 0.0
    p = regularized_beta(df / (df + t * t), df / 2.0, 0.5)
    return min(1.0, max(0.0, p))


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def mean_se(samples: Sequence[float]) -> tuple[float, float]:
    if len(samples) < 2:
        raise InsufficientSamples(f"need >= 2 samples, got {len(samples)}")
    arr = np.asarray(samples, dtype=float)
    return float(arr.mean()), float(arr.std(ddof=1) / math.sqrt(arr.size))


def welch_t(a: Sequence[float], b: Sequence[float]) -> WelchResult:
    if len(a) < 2 or len(b) < 2:
        raise InsufficientSamples("welch_t needs >= 2 samples per group")
    xa = np.asarray(a, dtype=float)
    xb = np.asarray(b, dtype=float)
    na, nb = xa.size, xb.size
    va, vb = xa.var(ddof=1), xb.var(ddof=1)
    diff = float(xa.mean() - xb.mean())

    if va == 0 and vb == 0:
        if diff == 0:
            return WelchResult(t=0.0, df=float(na + nb - 2), p_two_sided=1.0)
        raise DegenerateVariance("both samples have zero variance and different means")

    sa, sb = va / na, vb / nb
    t = diff / math.sqrt(sa + sb)
    df = (sa + sb) ** 2 / (sa**2 / (na - 1) + sb**2 / (nb - 1))
    return WelchResult(t=float(t), df=float(df), p_two_sided=t_two_sided_p(t, df))


def linear_fit(points: Sequence[tuple[float, float]]) -> FitResult:
    xs = np.asarray([p[0] for p in points], dtype=float)
    ys = np.asarray([p[1] for p in points], dtype=float)
    if xs.size < 2 or np.unique(xs).size < 2:
        raise SingularFit("need at least two distinct x values")
    x_mean, y_mean = xs.mean(), ys.mean()
    sxx = float(((xs - x_mean) ** 2).sum())
    sxy = float(((xs - x_mean) * (ys - y_mean)).sum())
    slope = sxy / sxx
    intercept = float(y_mean - slope * x_mean)
    ss_res = float(((ys - (slope * xs + intercept)) ** 2).sum())
    ss_tot = float(((ys - y_mean) ** 2).sum())
    r_squared = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return FitResult(slope=slope, intercept=intercept, r_squared=min(1.0, max(0.0, r_squared)))


def efficiency_ratio(flat_mean_tokens: float, focus_mean_tokens: float) -> float:
    """rho = flat / focus; a zero focus mean raises ZeroDivisionError."""
    if focus_mean_tokens == 0:
        raise ZeroDivisionError("focus mean tokens is zero")
    return flat_mean_tokens / focus_mean_tokens


def predicted_ratio(F: float, r: float, N: int) -> float:
    """rho(N) ~ N|F| / (|F| + N|r|), tending to |F|/|r| as N grows."""
    if F <= 0 or r < 0 or N < 1:
        raise ValueError("need F > 0, r >= 0, N >= 1")
    return N * F / (F + N * r)
