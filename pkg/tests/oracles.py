"""Slow, obviously-correct reference computations used as test oracles.

Everything here works on plain Python records and dicts, with exact rational
arithmetic where a threshold is involved, and shares no code with the package.
"""
from __future__ import annotations

import math
from fractions import Fraction
from statistics import median


def top_k(n: int, fraction) -> int:
    return math.ceil(Fraction(str(fraction)) * n)


def select_top(values: dict, fraction) -> set:
    """Keys whose value is at least the k-th largest value (k = ceil(fraction * n))."""
    if not values:
        return set()
    k = top_k(len(values), fraction)
    cutoff = sorted(values.values(), reverse=True)[k - 1]
    return {key for key, v in values.items() if v >= cutoff}


def period_views(views_at: list[dict], d1: int, d2: int) -> dict:
    """``views_at[d]`` maps question id -> cumulative views at dump d (absent = missing)."""
    return {q: v - views_at[d1].get(q, 0) for q, v in views_at[d2].items()}


def labels(views_at: list[dict], i: int, j: int, k: int, fraction="0.15", threshold="-0.05") -> dict[int, bool]:
    """question id -> being forgotten, for the dump triple (i, j, k)."""
    cur = period_views(views_at, i, j)
    fut = period_views(views_at, j, k)
    chosen = select_top(cur, fraction)
    out = {}
    for q in chosen:
        if q not in fut:
            continue
        growth = Fraction(fut[q] - cur[q], cur[q])
        out[q] = growth < Fraction(threshold)
    return out


def views_by_dump(snapshots) -> list[dict]:
    return [{q.id: q.view_count for q in s.questions} for s in snapshots]


def concentration(views: dict, fraction) -> float:
    ordered = sorted(views.values(), reverse=True)
    total = sum(ordered)
    n_top = min(top_k(len(ordered), fraction), len(ordered))
    return Fraction(sum(ordered[:n_top]), total) if total else Fraction(0)


def tag_popularity(snapshot, start_us, end_us, to_us) -> dict:
    counts: dict[str, int] = {}
    for q in snapshot.questions:
        if start_us < to_us(q.creation_date) <= end_us:
            for t in set(q.tags):
                counts[t] = counts.get(t, 0) + 1
    return counts


def histogram(values, edges) -> list[int]:
    counts = [0] * (len(edges) + 1)
    for v in values:
        b = 0
        while b < len(edges) and v >= edges[b]:
            b += 1
        counts[b] += 1
    return counts


def quartiles(values) -> tuple:
    """Linear-interpolation quartiles (the usual 'type 7' definition)."""
    xs = sorted(values)
    n = len(xs)

    def q(p):
        h = (n - 1) * p
        lo = math.floor(h)
        hi = min(lo + 1, n - 1)
        return xs[lo] + (h - lo) * (xs[hi] - xs[lo])

    return q(0.25), median(xs), q(0.75)
