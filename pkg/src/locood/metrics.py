"""AUROC and rank-based significance tests.

Signed-rank and rank-sum p-values are exact for small tie-free samples
(null distributions counted by polynomial recursion) and otherwise use the
normal approximation with continuity and tie corrections.  Kruskal-Wallis
uses the chi-square survival function, Spearman the t distribution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import MetricError
from .kernels import average_ranks

EXACT_MAX_N = 50


@dataclass(frozen=True)
class ScoredSample:
    score: float
    is_ood: bool


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    method: str
    n: int = 0

    __test__ = False  # not a pytest class


def _as_scores(samples_or_scores, is_ood=None):
    if is_ood is None:
        scores = np.array([s.score for s in samples_or_scores], dtype=np.float64)
        flags = np.array([bool(s.is_ood) for s in samples_or_scores])
    else:
        scores = np.asarray(samples_or_scores, dtype=np.float64).ravel()
        flags = np.asarray(is_ood).astype(bool).ravel()
        if len(scores) != len(flags):
            raise MetricError("scores and flags differ in length")
    if not np.all(np.isfinite(scores)):
        raise MetricError("scores must be finite")
    return scores, flags


def auroc(samples, is_ood=None):
    """Probability that an OOD sample outscores an ID sample, ties counting one half.

    Accepts a list of :class:`ScoredSample` or parallel ``scores, is_ood`` arrays.
    """
    scores, flags = _as_scores(samples, is_ood)
    n_pos = int(flags.sum())
    n_neg = len(flags) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs at least one OOD and one ID sample")
    ranks = average_ranks(scores)
    u = ranks[flags].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def macro_ovr_auroc(probs, labels):
    """Mean one-vs-rest AUROC over the classes present in ``labels``."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    present = np.unique(labels)
    if len(present) < 2:
        raise MetricError("on-task AUROC needs at least two classes")
    return float(np.mean([auroc(probs[:, c], labels == c) for c in present]))


def _tie_term(ranks_source):
    _, counts = np.unique(ranks_source, return_counts=True)
    return float(np.sum(counts**3 - counts))


def _norm_two_sided(z):
    return min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))


def spearman(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(x) != len(y):
        raise MetricError("spearman inputs differ in length")
    n = len(x)
    if n < 3:
        raise MetricError("spearman needs at least 3 pairs")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise MetricError("spearman correlation is undefined for a constant input")
    rx = average_ranks(x) - (n + 1) / 2.0
    ry = average_ranks(y) - (n + 1) / 2.0
    rho = float(np.dot(rx, ry) / math.sqrt(np.dot(rx, rx) * np.dot(ry, ry)))
    rho = max(-1.0, min(1.0, rho))
    if abs(rho) >= 1.0:
        p = 0.0
    else:
        t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
        p = float(2.0 * special.stdtr(n - 2, -abs(t)))
    return TestResult(rho, min(1.0, p), "spearman", n)


def signed_rank_counts(n):
    """Number of sign patterns giving each positive-rank sum 0..n(n+1)/2 (no ties)."""
    counts = np.zeros(n * (n + 1) // 2 + 1, dtype=np.int64)
    counts[0] = 1
    for r in range(1, n + 1):
        counts[r:] = counts[r:] + counts[:-r].copy()
    return counts


def rank_sum_counts(n1, n2):
    """Number of rank arrangements giving each U = 0..n1*n2 (no ties).

    Coefficients of the Gaussian binomial ``[n1 + n2 choose n1]_q``, built by
    multiplying with ``1 - q^(n2+i)`` and dividing by ``1 - q^i``.
    """
    size = n1 * n2 + 1
    poly = np.zeros(size, dtype=np.int64)
    poly[0] = 1
    for i in range(1, n1 + 1):
        shift = n2 + i
        if shift < size:
            poly[shift:] = poly[shift:] - poly[:-shift].copy()
        for k in range(i, size):
            poly[k] += poly[k - i]
    return poly


def wilcoxon_signed_rank(a, b):
    """Paired two-sided test; W is the smaller of the signed rank sums."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if len(a) != len(b):
        raise MetricError("wilcoxon inputs differ in length")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return TestResult(0.0, 1.0, "wilcoxon", 0)
    ranks = average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    abs_d = np.abs(d)
    if n <= EXACT_MAX_N and len(np.unique(abs_d)) == n:
        counts = signed_rank_counts(n)
        p = min(1.0, 2.0 * counts[: int(w) + 1].sum() / counts.sum())
        return TestResult(w, float(p), "wilcoxon", n)
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - _tie_term(abs_d) / 48.0
    if var <= 0:
        return TestResult(w, 1.0, "wilcoxon", n)
    z = (abs(w - mean) - 0.5) / math.sqrt(var)
    p = 1.0 if z <= 0 else _norm_two_sided(z)
    return TestResult(w, p, "wilcoxon", n)


def mann_whitney_u(a, b):
    """Two-sided rank-sum test; the statistic is U for sample ``a``."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    n1, n2 = len(a), len(b)
    if n1 == 0 or n2 == 0:
        raise MetricError("mann-whitney needs two nonempty samples")
    pooled = np.concatenate([a, b])
    ranks = average_ranks(pooled)
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2.0)
    n = n1 + n2
    if n <= EXACT_MAX_N and len(np.unique(pooled)) == n:
        counts = rank_sum_counts(n1, n2)
        total = counts.sum()
        k = int(round(u))
        p = min(1.0, 2.0 * min(counts[: k + 1].sum(), counts[k:].sum()) / total)
        return TestResult(u, float(p), "mann-whitney", n)
    mean = n1 * n2 / 2.0
    var = n1 * n2 / 12.0 * ((n + 1) - _tie_term(pooled) / (n * (n - 1)))
    if var <= 0:
        return TestResult(u, 1.0, "mann-whitney", n)
    z = (abs(u - mean) - 0.5) / math.sqrt(var)
    p = 1.0 if z <= 0 else _norm_two_sided(z)
    return TestResult(u, p, "mann-whitney", n)


def chi2_sf(x, dof):
    """Chi-square survival function via the regularised upper incomplete gamma."""
    if x <= 0:
        return 1.0
    return float(special.gammaincc(dof / 2.0, x / 2.0))


def kruskal_wallis(groups):
    groups = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    if len(groups) < 2:
        raise MetricError("kruskal-wallis needs at least two groups")
    if any(len(g) == 0 for g in groups):
        raise MetricError("kruskal-wallis group is empty")
    pooled = np.concatenate(groups)
    n = len(pooled)
    ranks = average_ranks(pooled)
    h = 0.0
    start = 0
    for g in groups:
        r = ranks[start:start + len(g)]
        h += r.sum() ** 2 / len(g)
        start += len(g)
    h = 12.0 / (n * (n + 1)) * h - 3.0 * (n + 1)
    ties = 1.0 - _tie_term(pooled) / (n**3 - n)
    if ties <= 0:
        return TestResult(0.0, 1.0, "kruskal-wallis", n)
    h = max(0.0, h / ties)
    return TestResult(h, chi2_sf(h, len(groups) - 1), "kruskal-wallis", n)


def holm_correction(p_values):
    """Holm step-down adjusted p-values, returned in input order."""
    p = np.asarray(p_values, dtype=np.float64).ravel()
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise MetricError("p-values must lie in [0, 1]")
    m = len(p)
    order = np.argsort(p, kind="mergesort")
    adjusted = np.empty(m)
    running = 0.0
    for rank, idx in enumerate(order):
        running = max(running, (m - rank) * p[idx])
        adjusted[idx] = min(1.0, running)
    return adjusted


def quartiles(values):
    """Linear-interpolation (numpy default) first quartile, median, third quartile."""
    v = np.asarray(values, dtype=np.float64)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return float(q1), float(med), float(q3)


def median_iqr(values):
    q1, med, q3 = quartiles(values)
    return med, q3 - q1
