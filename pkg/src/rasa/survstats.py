"""Survival statistics: Cox partial likelihood, Bernoulli KL, C-index,
Kaplan-Meier and the two-group log-rank test.

Event indicators may be fractional (mixed labels). The Cox loss uses them as
continuous weights; the metrics threshold them at 0.5.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numcore import NonFiniteError, Tensor, apply

EVENT_THRESHOLD = 0.5
KL_CLAMP = 1e-7


class UndefinedStatisticError(ValueError):
    """Raised when a statistic has no defined value for the given data."""


def _labels(times, events, n=None):
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    events = np.asarray(events, dtype=np.float64).reshape(-1)
    if times.shape != events.shape:
        raise ValueError(f"times {times.shape} and events {events.shape} differ")
    if n is not None and times.size != n:
        raise ValueError(f"expected {n} labels, got {times.size}")
    return times, events


def risk_sets(times) -> np.ndarray:
    """Boolean matrix R with R[i, j] = t_j >= t_i (ties share risk sets)."""
    t = np.asarray(times, dtype=np.float64).reshape(-1)
    return t[None, :] >= t[:, None]


# ------------------------------------------------------------------ losses

def cox_loss(scores: Tensor, times, events) -> Tensor:
    """Negative Cox log partial likelihood, summed over events.

    ``-sum_i d_i * (y_i - log sum_{j: t_j >= t_i} exp(y_j))`` with Breslow
    handling of ties.
    """
    y = scores.data.reshape(-1)
    if y.size == 0:
        raise ValueError("cox_loss needs at least one sample")
    if not np.all(np.isfinite(y)):
        raise NonFiniteError("cox_loss")
    t, d = _labels(times, events, y.size)
    if np.any(t <= 0):
        raise ValueError("survival times must be positive")
    R = risk_sets(t)
    masked = np.where(R, y[None, :], -np.inf)
    m = masked.max(axis=1)
    lse = m + np.log(np.exp(masked - m[:, None]).sum(axis=1))
    value = -np.sum(d * (y - lse))

    def grad(g):
        share = np.where(R, np.exp(y[None, :] - lse[:, None]), 0.0)
        dy = -d + (d[:, None] * share).sum(axis=0)
        return (g * dy.reshape(scores.shape),)

    return apply("cox_loss", np.array(value), (scores,), grad)


def _bernoulli_kl(p, q):
    return p * np.log(p / q) + (1.0 - p) * np.log((1.0 - p) / (1.0 - q))


def kl_loss(y_student: Tensor, y_teacher) -> Tensor:
    """KL(Bernoulli(sigmoid(y_s)) || Bernoulli(sigmoid(y_t))).

    The teacher score is a constant; probabilities are clamped to
    [1e-7, 1 - 1e-7] and the gradient is zero where the clamp is active.
    """
    ys = float(np.asarray(y_student.data).reshape(()))
    yt = float(np.asarray(getattr(y_teacher, "data", y_teacher)).reshape(()))
    if not (math.isfinite(ys) and math.isfinite(yt)):
        raise NonFiniteError("kl_loss")
    p_raw = _sigmoid_scalar(ys)
    p = min(max(p_raw, KL_CLAMP), 1.0 - KL_CLAMP)
    q = min(max(_sigmoid_scalar(yt), KL_CLAMP), 1.0 - KL_CLAMP)
    value = _bernoulli_kl(p, q)
    clamped = p != p_raw

    def grad(g):
        if clamped:
            return (np.zeros_like(y_student.data),)
        dp = math.log(p / q) - math.log((1.0 - p) / (1.0 - q))
        return (np.full_like(y_student.data, g * dp * p * (1.0 - p)),)

    return apply("kl_loss", np.array(value), (y_student,), grad)


def _sigmoid_scalar(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


# ------------------------------------------------------------------ metrics

def concordance_index(scores, times, events) -> float:
    """Harrell's C: among pairs with t_i < t_j and an event at i, the share
    where y_i > y_j (score ties count one half)."""
    y = np.asarray(scores, dtype=np.float64).reshape(-1)
    t, e = _labels(times, events, y.size)
    if y.size < 2:
        raise ValueError("concordance_index needs at least two samples")
    observed = e >= EVENT_THRESHOLD
    comparable = (t[:, None] < t[None, :]) & observed[:, None]
    n_pairs = int(comparable.sum())
    if n_pairs == 0:
        raise UndefinedStatisticError("concordance index undefined: no comparable pairs")
    diff = y[:, None] - y[None, :]
    credit = np.where(diff > 0, 1.0, np.where(diff == 0, 0.5, 0.0))
    return float(credit[comparable].sum() / n_pairs)


@dataclass(frozen=True)
class KmCurve:
    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray

    def __len__(self) -> int:
        return len(self.times)

    def at(self, t: float) -> float:
        """S(t) as a right-continuous step function."""
        idx = np.searchsorted(self.times, t, side="right")
        return 1.0 if idx == 0 else float(self.survival[idx - 1])


def kaplan_meier(times, events) -> KmCurve:
    t, e = _labels(times, events)
    if t.size == 0:
        raise ValueError("kaplan_meier needs at least one sample")
    observed = e >= EVENT_THRESHOLD
    event_times = np.unique(t[observed])
    at_risk = np.array([(t >= u).sum() for u in event_times], dtype=np.int64)
    deaths = np.array([(observed & (t == u)).sum() for u in event_times], dtype=np.int64)
    survival = np.cumprod(1.0 - deaths / at_risk) if event_times.size else np.empty(0)
    return KmCurve(event_times, survival, at_risk, deaths)


def log_rank_test(times_a, events_a, times_b, events_b) -> tuple[float, float]:
    """Two-group log-rank test; returns (chi-square, p-value) with 1 dof."""
    ta, ea = _labels(times_a, events_a)
    tb, eb = _labels(times_b, events_b)
    if ta.size == 0 or tb.size == 0:
        raise ValueError("log_rank_test needs two non-empty groups")
    oa = ea >= EVENT_THRESHOLD
    ob = eb >= EVENT_THRESHOLD
    event_times = np.unique(np.concatenate([ta[oa], tb[ob]]))
    if event_times.size == 0:
        raise UndefinedStatisticError("log-rank undefined: no events in either group")
    observed = expected = variance = 0.0
    for u in event_times:
        na = float((ta >= u).sum())
        nb = float((tb >= u).sum())
        da = float((oa & (ta == u)).sum())
        d = da + float((ob & (tb == u)).sum())
        n = na + nb
        observed += da
        expected += d * na / n
        if n > 1:
            variance += d * (na / n) * (nb / n) * (n - d) / (n - 1)
    if variance <= 0:
        raise UndefinedStatisticError("log-rank undefined: zero variance")
    chi2 = (observed - expected) ** 2 / variance
    return chi2, chi2_sf(chi2, 1)


# ------------------------------------------------------------------ gamma tail

def chi2_sf(x: float, dof: int) -> float:
    """Upper tail probability of a chi-square variate."""
    if x <= 0:
        return 1.0
    return gammaincc(dof / 2.0, x / 2.0)


def gammaincc(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x).

    Series expansion of P below x < a + 1, Lentz continued fraction above.
    """
    if a <= 0:
        raise ValueError("gammaincc needs a > 0")
    if x < 0:
        raise ValueError("gammaincc needs x >= 0")
    if x == 0:
        return 1.0
    log_pre = a * math.log(x) - x - math.lgamma(a)
    if x < a + 1.0:
        term = total = 1.0 / a
        ap = a
        for _ in range(10_000):
            ap += 1.0
            term *= x / ap
            total += term
            if abs(term) < abs(total) * 1e-16:
                break
        return max(0.0, 1.0 - total * math.exp(log_pre))
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    dd = 1.0 / b
    h = dd
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        dd = an * dd + b
        if abs(dd) < tiny:
            dd = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        dd = 1.0 / dd
        delta = dd * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return min(1.0, math.exp(log_pre) * h)
