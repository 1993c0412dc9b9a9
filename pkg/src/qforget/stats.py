"""Single-feature predictiveness: Mann-Whitney U, Spearman's rho and rank AUC."""
from __future__ import annotations

import math
import os
from typing import NamedTuple, Sequence

import numpy as np

from ._io import write_table

EXACT_MAX_PRODUCT = 64
SIGNIFICANCE = 0.05


def midranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks with ties replaced by the mean of the ranks they span."""
    x = np.asarray(values, dtype=np.float64)
    n = len(x)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(n, np.float64)
    i = 0
    while i < n:
        j = i + 1
        while j < n and xs[j] == xs[i]:
            j += 1
        ranks[order[i:j]] = (i + 1 + j) / 2.0
        i = j
    return ranks


def _tie_term(ranks: np.ndarray) -> float:
    _, counts = np.unique(ranks, return_counts=True)
    return float((counts ** 3 - counts).sum())


class MannWhitneyResult(NamedTuple):
    u: float
    p: float
    method: str


def _exact_two_sided(ranks: np.ndarray, n_a: int, u_twice_obs: int) -> float:
    """P(|U - mean| >= |u_obs - mean|) over every way of choosing sample A's ranks.

    Mid-ranks are doubled so every rank sum is an integer; the distribution of the
    doubled rank sum is built by a subset-sum count over all items.
    """
    n = len(ranks)
    r2 = np.rint(ranks * 2).astype(np.int64)
    max_sum = int(np.sort(r2)[-n_a:].sum()) if n_a else 0
    ways = np.zeros((n_a + 1, max_sum + 1), dtype=np.float64)
    ways[0, 0] = 1.0
    for r in r2:
        # iterate j downward so each item is used at most once
        for j in range(min(n_a, n), 0, -1):
            ways[j, r:] += ways[j - 1, : max_sum + 1 - r]
    dist = ways[n_a]
    total = dist.sum()
    offset = n_a * (n_a + 1)                     # doubled minimum rank sum
    u2 = np.arange(max_sum + 1) - offset         # doubled U per doubled rank sum
    mean2 = n_a * (n - n_a)                      # doubled E[U]
    extreme = np.abs(u2 - mean2) >= abs(u_twice_obs - mean2)
    return float(min(1.0, dist[extreme].sum() / total))


def mann_whitney(sample_a: Sequence[float], sample_b: Sequence[float], method: str = "auto") -> MannWhitneyResult:
    """Two-sided Mann-Whitney U test; ``u`` is reported for ``sample_a``.

    ``method`` is ``"exact"``, ``"normal"`` (tie-corrected, continuity-corrected) or
    ``"auto"``, which enumerates exactly when ``n_a * n_b <= 64``.
    """
    a = np.asarray(sample_a, np.float64)
    b = np.asarray(sample_b, np.float64)
    n_a, n_b = len(a), len(b)
    if n_a == 0 or n_b == 0:
        raise ValueError("both samples must be non-empty")
    ranks = midranks(np.concatenate([a, b]))
    r_a = ranks[:n_a].sum()
    u = r_a - n_a * (n_a + 1) / 2.0
    n = n_a + n_b
    if np.all(ranks == ranks[0]):
        return MannWhitneyResult(n_a * n_b / 2.0, 1.0, "degenerate")
    if method == "auto":
        method = "exact" if n_a * n_b <= EXACT_MAX_PRODUCT else "normal"
    if method == "exact":
        u_twice = int(round(2 * r_a)) - n_a * (n_a + 1)
        return MannWhitneyResult(u, _exact_two_sided(ranks, n_a, u_twice), "exact")
    if method != "normal":
        raise ValueError(f"unknown method {method!r}")
    mean = n_a * n_b / 2.0
    var = n_a * n_b / 12.0 * ((n + 1) - _tie_term(ranks) / (n * (n - 1)))
    if var <= 0:
        return MannWhitneyResult(u, 1.0, "normal")
    z = max(abs(u - mean) - 0.5, 0.0) / math.sqrt(var)
    p = math.erfc(z / math.sqrt(2.0))
    return MannWhitneyResult(u, min(1.0, p), "normal")


class SpearmanResult(NamedTuple):
    rho: float
    degenerate: bool


def spearman(x: Sequence[float], y: Sequence[float]) -> SpearmanResult:
    """Pearson correlation of mid-ranks; zero-variance input gives ``rho = 0`` flagged degenerate."""
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    if len(x) != len(y) or len(x) < 2:
        raise ValueError("spearman needs two equal-length inputs with at least 2 values")
    rx, ry = midranks(x), midranks(y)
    dx, dy = rx - rx.mean(), ry - ry.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        return SpearmanResult(0.0, True)
    rho = float(dx @ dy) / math.sqrt(sxx * syy)
    return SpearmanResult(max(-1.0, min(1.0, rho)), False)


def rank_auc(values: Sequence[float], labels: Sequence[int]) -> float:
    """P(value_pos > value_neg) + P(equal) / 2, computed from mid-ranks."""
    v = np.asarray(values, np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = midranks(v)
    u_pos = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_pos / (n_pos * n_neg))


def single_feature_auc(values: Sequence[float], labels: Sequence[int]) -> float:
    """Rank AUC with orientation folded so the result is at least 0.5."""
    auc = rank_auc(values, labels)
    return max(auc, 1.0 - auc)


class FeatureReportRow(NamedTuple):
    feature: str
    u: float
    p: float
    spearman_rho: float
    auc: float
    n_forgotten: int
    n_unforgotten: int
    n_missing: int
    significant: bool
    degenerate: bool


REPORT_COLUMNS = FeatureReportRow._fields


def predictiveness_report(matrix, dataset) -> list[FeatureReportRow]:
    """One row per dense feature, missing rows excluded per feature, sorted by AUC."""
    labels = np.asarray(dataset.being_forgotten, bool)
    if matrix.n_rows != len(labels):
        raise ValueError("matrix and dataset are not aligned")
    rows = []
    for j, spec in enumerate(matrix.schema[: matrix.n_dense]):
        col = matrix.dense[:, j]
        ok = ~np.isnan(col)
        v, y = col[ok], labels[ok]
        pos, neg = v[y], v[~y]
        if len(pos) == 0 or len(neg) == 0:
            rows.append(FeatureReportRow(spec.name, math.nan, math.nan, math.nan, math.nan,
                                         len(pos), len(neg), int((~ok).sum()), False, True))
            continue
        mw = mann_whitney(pos, neg)
        sr = spearman(v, y.astype(np.float64))
        auc = single_feature_auc(v, y)
        rows.append(FeatureReportRow(
            spec.name, mw.u, mw.p, sr.rho, auc, len(pos), len(neg), int((~ok).sum()),
            mw.p < SIGNIFICANCE, sr.degenerate or mw.method == "degenerate",
        ))
    order = sorted(range(len(rows)), key=lambda i: (-(rows[i].auc if not math.isnan(rows[i].auc) else -1), i))
    return [rows[i] for i in order]


def write_report(rows: Sequence[FeatureReportRow], path: str | os.PathLike, config=None):
    return write_table(path, REPORT_COLUMNS, rows, config or {"report": "predictiveness"})
