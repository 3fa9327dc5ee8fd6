"""ROC analysis, Youden thresholds and the paired comparison protocol.

Everything here is pure Python/numpy; the Student-t tail comes from a
continued-fraction regularized incomplete beta function.
"""

import math
from dataclasses import dataclass

import numpy as np

from ._validation import ZeroVarianceError

BETACF_EPS = 1e-12
BETACF_MAXITER = 10000


@dataclass(frozen=True)
class RocCurve:
    """Operating points sorted by descending threshold.

    The first point is ``(inf, 0, 0)`` and the last ``(-inf, 1, 1)``; between
    them there is one point per distinct score, meaning "predict positive when
    score >= threshold".
    """

    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    positives: int
    negatives: int

    @property
    def points(self):
        return list(zip(self.thresholds.tolist(), self.tpr.tolist(), self.fpr.tolist()))


@dataclass(frozen=True)
class PairedTestResult:
    t_statistic: float
    degrees_of_freedom: int
    p_two_tailed: float
    mean_difference: float


@dataclass(frozen=True)
class StatsSummary:
    n: int
    mean: float
    std_dev: float
    ks_statistic: float
    ks_p: float
    normal_at_005: bool
    degenerate: bool = False


# ---------------------------------------------------------------------------
# ROC


def roc_curve(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    labels = labels.astype(bool)
    pos = int(labels.sum())
    neg = int(labels.size - pos)
    if pos == 0 or neg == 0:
        raise ValueError("both classes must be present")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # last index of each run of tied scores
    last = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    thresholds = np.r_[np.inf, s[last], -np.inf]
    tpr = np.r_[0.0, tp[last] / pos, 1.0]
    fpr = np.r_[0.0, fp[last] / neg, 1.0]
    return RocCurve(thresholds, tpr, fpr, pos, neg)


def auc(curve):
    """Trapezoidal area under the ROC curve."""
    dx = np.diff(curve.fpr)
    return float(np.sum(dx * (curve.tpr[1:] + curve.tpr[:-1]) * 0.5))


def youden_threshold(curve):
    """Operating point maximizing ``J = tpr - fpr``.

    Ties go to the higher tpr, then to the lower threshold.  The returned
    threshold is the midpoint between the chosen score and the next lower
    distinct score (the score itself when there is none).
    """
    thr = curve.thresholds[1:-1]
    j = curve.tpr[1:-1] - curve.fpr[1:-1]
    tpr = curve.tpr[1:-1]
    # thresholds are descending, so among equal (J, tpr) the last index is lowest
    best = 0
    for i in range(1, j.size):
        if j[i] > j[best] or (j[i] == j[best] and tpr[i] >= tpr[best]):
            best = i
    if best + 1 < thr.size:
        threshold = 0.5 * (thr[best] + thr[best + 1])
    else:
        threshold = thr[best]
    return float(threshold), float(j[best])


# ---------------------------------------------------------------------------
# Special functions


def _betacf(a, b, x):
    # modified Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, BETACF_MAXITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < BETACF_EPS:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a, b, x, complement=None):
    """Regularized incomplete beta function ``I_x(a, b)``.

    ``complement`` may pass ``1 - x`` computed without cancellation, which
    matters when ``x`` is within a few ulps of 1.
    """
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be > 0")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    y = 1.0 - x if complement is None else complement
    if x == 0.0:
        return 0.0
    if y == 0.0:
        return 1.0
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log(y)
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, y) / b


def student_t_two_tailed(t, df):
    """Two-tailed p-value ``P(|T| >= |t|)`` for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError("df must be > 0")
    if t == 0:
        return 1.0
    t2 = t * t
    p = betainc(0.5 * df, 0.5, df / (df + t2), complement=t2 / (df + t2))
    return min(1.0, max(0.0, p))


def normal_cdf(x, mean=0.0, std=1.0):
    return 0.5 * math.erfc(-(x - mean) / (std * math.sqrt(2.0)))


def kolmogorov_sf(lam):
    """Survival function of the limiting Kolmogorov distribution, ``P(K > lam)``."""
    if lam <= 0:
        return 1.0
    if lam < 1.18:
        # Jacobi theta form converges fast for small arguments
        y = -(math.pi**2) / (8.0 * lam * lam)
        cdf = math.sqrt(2.0 * math.pi) / lam * sum(math.exp(y * (2 * k - 1) ** 2) for k in range(1, 8))
        return min(1.0, max(0.0, 1.0 - cdf))
    total = 0.0
    for k in range(1, 101):
        term = math.exp(-2.0 * k * k * lam * lam)
        total += term if k % 2 else -term
        if term < 1e-18:
            break
    return min(1.0, max(0.0, 2.0 * total))


def lilliefors_pvalue(d, n):
    """Dallal-Wilkinson approximation to the Lilliefors p-value.

    Accurate for p <= 0.1, which covers the usual significance levels; values
    above 0.1 are only indicative.
    """
    if n > 100:
        d = d * (n / 100.0) ** 0.49
        n = 100
    p = math.exp(
        -7.01256 * d * d * (n + 2.78019)
        + 2.99587 * d * math.sqrt(n + 2.78019)
        - 0.122119
        + 0.974598 / math.sqrt(n)
        + 1.67997 / n
    )
    return min(1.0, p)


# ---------------------------------------------------------------------------
# Tests


def paired_t_test(a, b):
    """Paired Student's t-test on ``d = a - b`` with a two-tailed p-value."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    n = a.size
    if n < 2:
        raise ValueError("need at least two pairs")
    d = a - b
    mean = math.fsum(d) / n
    var = math.fsum((d - mean) ** 2) / (n - 1)
    if var <= 0.0:
        raise ZeroVarianceError("differences have zero variance")
    t = mean / math.sqrt(var / n)
    return PairedTestResult(t, n - 1, student_t_two_tailed(t, n - 1), mean)


def ks_statistic(samples, cdf):
    """One-sample Kolmogorov-Smirnov distance and asymptotic p-value.

    ``p = Q(sqrt(n) * D)`` with ``Q`` the Kolmogorov survival function.
    """
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    n = x.size
    if n == 0:
        raise ValueError("empty sample")
    f = np.array([cdf(v) for v in x], dtype=np.float64)
    if np.any((f < 0) | (f > 1)):
        raise ValueError("cdf must map into [0, 1]")
    i = np.arange(1, n + 1)
    d = float(max(np.max(np.abs(i / n - f)), np.max(np.abs((i - 1) / n - f))))
    return d, kolmogorov_sf(math.sqrt(n) * d)


def summarize(samples, alpha=0.05, correction="lilliefors"):
    """Mean, sample standard deviation and a KS normality check.

    The KS distance is taken against a normal with the sample's own mean and
    standard deviation.  Because those parameters are estimated, the default
    ``correction="lilliefors"`` converts the distance with the Lilliefors null
    distribution (as GraphPad Prism does); ``correction=None`` gives the plain
    asymptotic Kolmogorov p-value, which is strongly conservative here.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    n = x.size
    if n < 2:
        raise ValueError("need at least two samples")
    mean = math.fsum(x) / n
    std = math.sqrt(math.fsum((x - mean) ** 2) / (n - 1))
    if std == 0.0:
        return StatsSummary(n, mean, 0.0, math.nan, math.nan, False, degenerate=True)
    d, p = ks_statistic(x, lambda v: normal_cdf(v, mean, std))
    if correction == "lilliefors":
        p = lilliefors_pvalue(d, n)
    elif correction is not None:
        raise ValueError(f"unknown correction {correction!r}")
    return StatsSummary(n, mean, std, d, p, p > alpha)
