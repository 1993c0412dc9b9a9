"""Labeled datasets of recently highly viewed questions, and the descriptive analyses.

A dataset is defined by three dumps (last, current, next).  Current views are the
views gained between last and current, future views those gained between current
and next.  The top fraction of questions by current views is kept and labeled
*being forgotten* when ``(future - current) / current`` falls strictly below the
growth threshold.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from ._io import header_line, write_json
from .records import dump_label, parse_timestamp, to_micros
from .store import NULL, SnapshotStore, StoreView, locate, views_between

log = logging.getLogger(__name__)

MONTH = timedelta(days=30.44)


class CohortError(RuntimeError):
    pass


class Label(str, Enum):
    BEING_FORGOTTEN = "being_forgotten"
    UNFORGOTTEN = "unforgotten"


@dataclass(frozen=True)
class CohortConfig:
    gap_months: int = 6
    highly_viewed_fraction: float = 0.15
    forgotten_growth_threshold: float = -0.05
    top_n_grid: tuple[float, ...] = (0.10, 0.20, 0.30, 0.40, 0.50)
    stale_view_ceiling: int = 50
    strict: bool = False

    def __post_init__(self):
        if not 0 < self.highly_viewed_fraction <= 1:
            raise ValueError("highly_viewed_fraction must lie in (0, 1]")
        if not self.forgotten_growth_threshold < 0:
            raise ValueError("forgotten_growth_threshold must be negative")
        if self.gap_months < 1:
            raise ValueError("gap_months must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "CohortConfig":
        d = dict(d)
        if "top_n_grid" in d:
            d["top_n_grid"] = tuple(d["top_n_grid"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["top_n_grid"] = list(self.top_n_grid)
        return d


def top_count(fraction: float, n: int) -> int:
    """``ceil(fraction * n)`` without floating-point overshoot (0.07 * 100 -> 7)."""
    return math.ceil(round(fraction * n, 9))


def top_mask(values: np.ndarray, fraction: float) -> np.ndarray:
    """Select the ``ceil(fraction * n)`` largest values, plus anything tied with the last one."""
    n = len(values)
    if n == 0:
        return np.zeros(0, bool)
    k = top_count(fraction, n)
    if k <= 0:
        return np.zeros(n, bool)
    cutoff = np.partition(values, n - k)[n - k]
    return values >= cutoff


@dataclass(frozen=True)
class LabeledQuestion:
    question_id: int
    current_views: int
    future_views: int
    views_growth: float
    label: Label
    prediction_time: datetime


@dataclass
class CohortDataset:
    """One (last, current, next) triple of labeled highly viewed questions.

    Rows are ordered by question id.
    """

    t_last: datetime
    t_current: datetime
    t_next: datetime
    config: CohortConfig
    question_ids: np.ndarray
    current_views: np.ndarray
    future_views: np.ndarray
    views_growth: np.ndarray
    being_forgotten: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def prediction_time(self) -> datetime:
        return self.t_current

    @property
    def n_total(self) -> int:
        return len(self.question_ids)

    @property
    def n_being_forgotten(self) -> int:
        return int(self.being_forgotten.sum())

    @property
    def n_unforgotten(self) -> int:
        return self.n_total - self.n_being_forgotten

    def counts(self) -> dict[str, int]:
        return {"total": self.n_total, "being_forgotten": self.n_being_forgotten, "unforgotten": self.n_unforgotten}

    @property
    def labels(self) -> np.ndarray:
        """1 for being forgotten, 0 for unforgotten."""
        return self.being_forgotten.astype(np.int8)

    @property
    def questions(self) -> list[LabeledQuestion]:
        return [
            LabeledQuestion(
                int(q), int(c), int(f), float(g),
                Label.BEING_FORGOTTEN if b else Label.UNFORGOTTEN, self.t_current,
            )
            for q, c, f, g, b in zip(self.question_ids, self.current_views, self.future_views,
                                     self.views_growth, self.being_forgotten)
        ]

    def subset(self, rows: np.ndarray) -> "CohortDataset":
        return CohortDataset(
            self.t_last, self.t_current, self.t_next, self.config,
            self.question_ids[rows], self.current_views[rows], self.future_views[rows],
            self.views_growth[rows], self.being_forgotten[rows], dict(self.diagnostics),
        )

    def with_labels(self, being_forgotten: np.ndarray) -> "CohortDataset":
        out = self.subset(np.arange(self.n_total))
        out.being_forgotten = np.asarray(being_forgotten, bool)
        return out

    def describe(self) -> dict:
        return {
            "triple": [self.t_last.isoformat(), self.t_current.isoformat(), self.t_next.isoformat()],
            "config": self.config.to_dict(),
            "counts": self.counts(),
            "diagnostics": self.diagnostics,
        }


def views_growth(current: np.ndarray, future: np.ndarray) -> np.ndarray:
    current = np.asarray(current, dtype=np.float64)
    return (np.asarray(future, dtype=np.float64) - current) / current


def build_dataset(
    store: SnapshotStore, t_last: datetime, t_current: datetime, t_next: datetime, config: CohortConfig,
) -> CohortDataset:
    if not t_last < t_current < t_next:
        raise CohortError("dump times must satisfy last < current < next")
    for a, b in ((t_last, t_current), (t_current, t_next)):
        expected = config.gap_months * MONTH
        if abs((b - a) - expected) > timedelta(days=20):
            log.warning("period %s..%s is not ~%d months long", dump_label(a), dump_label(b), config.gap_months)

    cur = views_between(store, None, t_last, t_current, strict=config.strict)
    if len(cur.ids) == 0:
        raise CohortError(f"no questions at dump {dump_label(t_current)}")
    selected = top_mask(cur.views, config.highly_viewed_fraction)
    ids = cur.ids[selected]
    current = cur.views[selected]
    if (current == 0).any():
        raise CohortError(
            f"{int((current == 0).sum())} selected questions have zero current views; "
            "the corpus has too few viewed questions for the requested fraction"
        )

    fut = views_between(store, None, t_current, t_next, strict=config.strict)
    pos, present = locate(fut.ids, ids)
    n_absent = int((~present).sum())
    if n_absent:
        log.info("dropped %d selected questions absent from the next dump", n_absent)
    ids, current = ids[present], current[present]
    future = fut.views[pos[present]]
    growth = views_growth(current, future)
    forgotten = growth < config.forgotten_growth_threshold
    return CohortDataset(
        t_last, t_current, t_next, config, ids, current, future, growth, forgotten,
        diagnostics={
            "n_candidates": int(len(cur.ids)),
            "n_selected": int(selected.sum()),
            "n_absent_next": n_absent,
            "n_clamped_current": cur.n_clamped,
            "n_clamped_future": fut.n_clamped,
        },
    )


# --- serialization ----------------------------------------------------------

DATASET_COLUMNS = ("question_id", "current_views", "future_views", "views_growth", "label", "prediction_time")


def write_dataset(dataset: CohortDataset, path: str | os.PathLike) -> tuple[Path, Path]:
    """Write the dataset CSV and its JSON sidecar (``<path>.json``)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dataset.describe()
    pt = dataset.t_current.isoformat()
    with open(path, "w", newline="") as fh:
        fh.write(header_line(meta) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DATASET_COLUMNS)
        for q in dataset.questions:
            w.writerow([q.question_id, q.current_views, q.future_views, repr(q.views_growth), q.label.value, pt])
    sidecar = path.with_name(path.name + ".json")
    write_json(sidecar, meta)
    return path, sidecar


def read_dataset(path: str | os.PathLike) -> CohortDataset:
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))
    t_last, t_current, t_next = (parse_timestamp(t) for t in meta["triple"])
    return CohortDataset(
        t_last, t_current, t_next, CohortConfig.from_dict(meta["config"]),
        np.array([int(r["question_id"]) for r in rows], np.int64),
        np.array([int(r["current_views"]) for r in rows], np.int64),
        np.array([int(r["future_views"]) for r in rows], np.int64),
        np.array([float(r["views_growth"]) for r in rows], np.float64),
        np.array([r["label"] == Label.BEING_FORGOTTEN.value for r in rows], bool),
        meta.get("diagnostics", {}),
    )


# --- descriptive analyses ---------------------------------------------------


def forgotten_signal(
    store: SnapshotStore, dump_times: Sequence[datetime], reference_window: tuple[datetime, datetime],
    config: CohortConfig,
) -> list[dict]:
    """Fraction of each dump's top-N% questions (by accumulated views) that gained
    fewer than ``stale_view_ceiling`` views inside the reference window."""
    t1, t2 = reference_window
    window = views_between(store, None, t1, t2)
    rows = []
    for t in dump_times:
        snap = store.snapshot(t)
        ids = snap.questions.read("id")
        accumulated = snap.questions.read("view_count")
        pos, present = locate(window.ids, ids)
        for n in config.top_n_grid:
            top = top_mask(accumulated, n) & present
            n_top = int(top.sum())
            stale = int((window.views[pos[top]] < config.stale_view_ceiling).sum()) if n_top else 0
            rows.append({
                "dump_time": t.isoformat(), "top_n": n, "n_top": n_top,
                "n_stale": stale, "fraction_stale": stale / n_top if n_top else 0.0,
            })
    return rows


def view_concentration(store: SnapshotStore, t1: datetime, t2: datetime, top_k_grid: Sequence[float]) -> list[dict]:
    """Share of all period views received by the top K% most viewed questions."""
    views = np.sort(views_between(store, None, t1, t2).views)[::-1]
    total = int(views.sum())
    cum = np.concatenate([[0], np.cumsum(views)])
    if total == 0:
        log.warning("no views between %s and %s; shares reported as 0", dump_label(t1), dump_label(t2))
    rows = []
    for k in top_k_grid:
        n_top = min(top_count(k, len(views)), len(views))
        share = float(cum[n_top]) / total if total else 0.0
        rows.append({"top_k": k, "n_top": n_top, "share": share})
    return rows


def _tag_popularity(store, start: datetime, end: datetime) -> dict[str, int]:
    snap = store.snapshot(end)
    created = snap.questions.read("creation_date")
    in_period = (created > to_micros(start)) & (created <= to_micros(end))
    counts: dict[str, int] = {}
    for tags, keep in zip(snap.question_tags(), in_period):
        if keep:
            for tag in set(tags):
                counts[tag] = counts.get(tag, 0) + 1
    return counts


def _top_tags(popularity: dict[str, int], fraction: float) -> set[str]:
    names = sorted(popularity)
    if not names:
        return set()
    values = np.array([popularity[n] for n in names])
    return {n for n, keep in zip(names, top_mask(values, fraction)) if keep}


def persistence_overlap(
    store: SnapshotStore, period_pairs: Sequence[tuple[tuple[datetime, datetime], tuple[datetime, datetime]]],
    config: CohortConfig,
) -> list[dict]:
    """How many highly viewed questions (and popular tags) of one period stay on top in the next."""
    rows = []
    for (a, b), (c, d) in period_pairs:
        tops = []
        for s, e in ((a, b), (c, d)):
            deltas = views_between(store, None, s, e)
            if len(deltas.ids) == 0:
                raise CohortError(f"period {dump_label(s)}..{dump_label(e)} has no questions")
            tops.append(set(deltas.ids[top_mask(deltas.views, config.highly_viewed_fraction)].tolist()))
        q_overlap = len(tops[0] & tops[1]) / len(tops[0])
        pop1, pop2 = _tag_popularity(store, a, b), _tag_popularity(store, c, d)
        if not pop1 or not pop2:
            raise CohortError("a period has no newly posted questions to rank tags by")
        t1, t2 = _top_tags(pop1, config.highly_viewed_fraction), _top_tags(pop2, config.highly_viewed_fraction)
        rows.append({
            "period": f"{dump_label(a)}..{dump_label(b)}",
            "next_period": f"{dump_label(c)}..{dump_label(d)}",
            "n_top_questions": len(tops[0]),
            "question_overlap": q_overlap,
            "n_top_tags": len(t1),
            "tag_overlap": len(t1 & t2) / len(t1),
        })
    return rows


@dataclass
class Histogram:
    """Counts over ``(-inf, e0), [e0, e1), ..., [e_last, inf)``."""

    edges: np.ndarray
    counts: np.ndarray

    def rows(self) -> list[dict]:
        lo = np.concatenate([[-np.inf], self.edges])
        hi = np.concatenate([self.edges, [np.inf]])
        return [{"lower": float(a), "upper": float(b), "count": int(c)} for a, b, c in zip(lo, hi, self.counts)]


def views_growth_histogram(dataset: CohortDataset, bin_edges: Sequence[float]) -> Histogram:
    edges = np.asarray(bin_edges, dtype=np.float64)
    if (np.diff(edges) <= 0).any():
        raise ValueError("bin edges must be strictly increasing")
    idx = np.searchsorted(edges, dataset.views_growth, side="right")
    return Histogram(edges, np.bincount(idx, minlength=len(edges) + 1).astype(np.int64))


CLOSED_INDICATORS = ("answer_count", "comment_count", "score", "view_count")


def _summary(values: np.ndarray) -> dict:
    if len(values) == 0:
        return {"n": 0, "q1": None, "median": None, "q3": None, "mean": None}
    q1, med, q3 = np.percentile(values, [25, 50, 75])
    return {"n": int(len(values)), "q1": float(q1), "median": float(med), "q3": float(q3), "mean": float(values.mean())}


def closed_comparison(store: SnapshotStore | StoreView, dataset: CohortDataset, t_current: datetime | None = None) -> dict:
    """Closed share of the dataset and indicator summaries for closed vs dataset questions.

    A question counts as closed when its closed date is at or before ``t_current``.
    """
    t_current = t_current or dataset.t_current
    snap = store.snapshot(t_current)
    ids = snap.questions.read("id")
    closed_at = snap.questions.read("closed_date")
    is_closed = (closed_at != NULL) & (closed_at <= to_micros(t_current))
    pos, present = locate(ids, dataset.question_ids)
    if not present.all():
        raise CohortError("dataset questions missing from the current snapshot")
    in_dataset_closed = is_closed[pos]
    out = {
        "n_dataset": int(len(pos)),
        "n_dataset_closed": int(in_dataset_closed.sum()),
        "closed_fraction": float(in_dataset_closed.mean()) if len(pos) else 0.0,
        "n_closed_total": int(is_closed.sum()),
        "indicators": {},
    }
    for name in CLOSED_INDICATORS:
        col = snap.questions.read(name)
        out["indicators"][name] = {"closed": _summary(col[is_closed]), "dataset": _summary(col[pos])}
    return out
