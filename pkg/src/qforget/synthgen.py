"""Synthetic multi-dump corpora with a planted, controllable forgetting signal.

Every question gets a base popularity from a Zipf law over a random rank.  In the
first full period after the first dump its expected views are ``rate * months * m``;
afterwards the expected views of each period are the realized views of the
previous period times a fresh growth factor ``m`` (scaled by the period lengths),
and realized views are negative-binomial around that mean.  Because the future
period's mean is anchored on the realized current views, the ratio of future to
current views is ``m`` times zero-centred noise and nothing observed before the
prediction time predicts it unless a signal is planted.

Null growth factors are log-normal around ``null_growth_median`` (about half of the
highly viewed questions end up below the -5% threshold).  The planted signal ties
growth to tag trends: every tag trends down, up or stays flat in how many new
questions use it, and with probability ``signal_strength`` a question whose
primary tag trends down draws every growth factor from ``down_growth_range``
(an up-trending one from ``up_growth_range``).

By default all questions are created before the first dump, so the views that
define labels never depend on how long a question has existed.  A question created
between dumps (``late_question_fraction``) gets views for the part of the period it
existed, then a fresh base-rate period, then the realized-views process.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from datetime import datetime
from pathlib import Path

import numpy as np

from ._io import write_json
from .cohort import MONTH, top_count
from .ingest import write_dump
from .pos import lexicon
from .records import (
    AnswerRecord, DumpSnapshot, QuestionRecord, TagRecord, UserRecord, dump_label, from_micros,
    parse_timestamp, to_micros,
)

TREND_CLASSES = ("down", "up", "flat")
MANIFEST = "manifest.json"


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_questions: int = 6000
    n_users: int = 1500
    n_tags: int = 24
    dump_times: tuple[str, ...] = ("2019-03-01T00:00:00", "2019-09-01T00:00:00", "2020-03-01T00:00:00")
    history_months: float = 24.0
    # view model
    zipf_exponent: float = 0.9
    base_views_per_month: float = 5.0
    dispersion: float = 100.0
    null_growth_median: float = 0.95
    null_growth_sigma: float = 0.25
    # planted signal
    signal_strength: float = 1.0
    down_tag_fraction: float = 0.5
    up_tag_fraction: float = 0.5
    tag_trend_per_year: float = 1.0
    down_growth_range: tuple[float, float] = (0.3, 0.75)
    up_growth_range: tuple[float, float] = (1.15, 1.6)
    # answers, comments, closing
    max_tags_per_question: int = 5
    answers_mean: float = 2.0
    answer_latency_hours: float = 20.0
    accept_probability: float = 0.5
    comments_mean: float = 1.5
    closed_fraction: float = 0.05
    late_question_fraction: float = 0.0
    # text
    words_per_body: int = 40
    words_per_title: int = 7
    tag_terms: int = 4
    tag_term_rate: float = 0.15
    code_probability: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_questions < 0 or self.n_users < 1 or self.n_tags < 1:
            raise SynthError("n_questions must be >= 0 and n_users, n_tags >= 1")
        probs = (self.signal_strength, self.down_tag_fraction, self.up_tag_fraction,
                 self.accept_probability, self.closed_fraction, self.tag_term_rate, self.code_probability,
                 self.late_question_fraction)
        if any(not 0 <= p <= 1 for p in probs):
            raise SynthError("probabilities and fractions must lie in [0, 1]")
        if self.down_tag_fraction + self.up_tag_fraction > 1:
            raise SynthError("down_tag_fraction + up_tag_fraction must not exceed 1")
        times = self.times()
        if len(times) < 1 or any(b <= a for a, b in zip(times, times[1:])):
            raise SynthError("dump_times must be non-empty and strictly increasing")
        if self.late_question_fraction > 0 and len(times) < 2:
            raise SynthError("questions after the first dump need at least two dumps")
        if self.history_months <= 0 or self.dispersion <= 0 or self.base_views_per_month <= 0:
            raise SynthError("history_months, dispersion and base_views_per_month must be positive")
        if not 1 <= self.max_tags_per_question <= 5:
            raise SynthError("max_tags_per_question must lie in 1..5")
        for lo, hi in (self.down_growth_range, self.up_growth_range):
            if not 0 <= lo <= hi:
                raise SynthError("growth ranges must satisfy 0 <= low <= high")

    def times(self) -> list[datetime]:
        return [parse_timestamp(t) for t in self.dump_times]

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        for key in ("dump_times", "down_growth_range", "up_growth_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("dump_times", "down_growth_range", "up_growth_range"):
            d[key] = list(d[key])
        return d


# --- static world ---------------------------------------------------------------


def _ms(us: np.ndarray) -> np.ndarray:
    """Truncate microsecond timestamps to whole milliseconds (dump precision)."""
    return (np.asarray(us, np.int64) // 1000) * 1000


@dataclass
class World:
    """Everything drawn once; dump snapshots are views of it at each dump time."""

    config: SynthConfig
    dump_us: np.ndarray
    tag_names: list[str]
    tag_class: list[str]
    # questions (index i has id i + 1)
    q_created: np.ndarray
    q_tags: list[tuple[str, ...]]
    q_class: np.ndarray            # trend class of the primary tag
    q_forced: np.ndarray           # growth drawn from the planted range
    q_owner: np.ndarray
    q_quality: np.ndarray
    q_comments: np.ndarray
    q_fav_rate: np.ndarray
    q_edit: np.ndarray             # last edit time or -1
    q_closed: np.ndarray           # closed time or -1
    q_accepted: np.ndarray         # answer index or -1
    q_title: list[str]
    q_body: list[str]
    views: np.ndarray              # cumulative view count per (question, dump)
    # answers (index j has id n_questions + j + 1)
    a_parent: np.ndarray
    a_created: np.ndarray
    a_score: np.ndarray
    a_comments: np.ndarray
    a_edit: np.ndarray
    a_owner: np.ndarray
    a_body: list[str]
    # users (index k has id k + 1)
    u_created: np.ndarray
    u_rep0: np.ndarray
    u_rep_rate: np.ndarray
    u_views_rate: np.ndarray
    u_up_rate: np.ndarray
    u_down_rate: np.ndarray

    @property
    def n_questions(self) -> int:
        return len(self.q_created)


def _vocabulary() -> list[str]:
    lex = lexicon()
    return sorted(w for cls in ("VERB", "NOUN", "PRP", "OTHER") for w in lex[cls] if len(w) >= 2)


_CODE_SNIPPETS = (
    'if (a < b && c > 0) { return "ok"; }',
    "for i in range(n): total += x[i] * 2",
    "SELECT id FROM posts WHERE score > 10 & flag = 'y';",
    "let v = items.filter(x => x.size >= 3);",
    "printf(\"%d\\n\", count);",
)


def _html_escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _sentence(rng, vocab, terms, n_words, term_rate) -> str:
    words = [vocab[i] for i in rng.integers(0, len(vocab), n_words)]
    if terms:
        for k in np.nonzero(rng.random(n_words) < term_rate)[0]:
            words[k] = terms[int(rng.integers(0, len(terms)))]
    return " ".join(words)


def _growth_factors(cfg: SynthConfig, rng, classes: np.ndarray, forced: np.ndarray, n_periods: int) -> np.ndarray:
    n = len(classes)
    m = cfg.null_growth_median * np.exp(cfg.null_growth_sigma * rng.standard_normal((n, n_periods)))
    lo_d, hi_d = cfg.down_growth_range
    lo_u, hi_u = cfg.up_growth_range
    down = rng.uniform(lo_d, hi_d, (n, n_periods))
    up = rng.uniform(lo_u, hi_u, (n, n_periods))
    m = np.where((forced & (classes == 0))[:, None], down, m)
    m = np.where((forced & (classes == 1))[:, None], up, m)
    return m


def _negative_binomial(rng, mean: np.ndarray, k: float) -> np.ndarray:
    mean = np.maximum(np.asarray(mean, np.float64), 0.0)
    return rng.negative_binomial(k, k / (k + mean)).astype(np.int64)


def build_world(config: SynthConfig) -> World:
    cfg = config
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x51]))
    times = cfg.times()
    dump_us = np.array([to_micros(t) for t in times], np.int64)
    first = dump_us[0]
    month_us = MONTH.total_seconds() * 1e6
    start = first - int(cfg.history_months * month_us)
    n, n_users, n_tags = cfg.n_questions, cfg.n_users, cfg.n_tags
    vocab = _vocabulary()

    # tags and their trend classes
    width = max(2, len(str(n_tags - 1)))
    tag_names = [f"tag{i:0{width}d}" for i in range(n_tags)]
    n_down = int(round(cfg.down_tag_fraction * n_tags))
    n_up = min(n_tags - n_down, int(round(cfg.up_tag_fraction * n_tags)))
    class_idx = np.array([0] * n_down + [1] * n_up + [2] * (n_tags - n_down - n_up))
    rng.shuffle(class_idx)
    tag_class = [TREND_CLASSES[c] for c in class_idx]
    tag_terms = {t: [f"{t}x{j}" for j in range(cfg.tag_terms)] for t in tag_names}
    tag_base = rng.uniform(0.5, 1.5, n_tags)
    trend = np.array([-1.0, 1.0, 0.0])[class_idx] * cfg.tag_trend_per_year

    # users
    u_created = _ms(start - rng.integers(int(month_us), int(24 * month_us), n_users))
    u_rep0 = rng.integers(1, 500, n_users)
    u_rep_rate = rng.gamma(1.0, 40.0, n_users)
    u_views_rate = rng.gamma(1.0, 5.0, n_users)
    u_up_rate = rng.gamma(1.0, 3.0, n_users)
    u_down_rate = rng.gamma(1.0, 0.5, n_users)
    user_weight = 1.0 / np.arange(1, n_users + 1) ** 0.7
    user_weight /= user_weight.sum()

    # questions: creation time, then primary tag by time-varying tag weights
    n_late = int(round(cfg.late_question_fraction * n))
    q_created = _ms(np.sort(np.concatenate([
        rng.integers(start, first, n - n_late), rng.integers(first, dump_us[-1], n_late),
    ])))
    years = (q_created - first) / (12 * month_us)
    logw = np.log(tag_base)[None, :] + trend[None, :] * years[:, None]
    w = np.exp(logw - logw.max(axis=1, keepdims=True))
    cum = np.cumsum(w / w.sum(axis=1, keepdims=True), axis=1)
    primary = np.minimum((cum < rng.random(n)[:, None]).sum(axis=1), n_tags - 1)
    q_class = class_idx[primary] if n else np.zeros(0, np.int64)
    by_class = {c: np.nonzero(class_idx == c)[0] for c in range(3)}
    q_tags = []
    n_tags_q = rng.integers(1, cfg.max_tags_per_question + 1, n)
    for i in range(n):
        pool = by_class[int(q_class[i])]
        others = [int(t) for t in rng.permutation(pool) if t != primary[i]][: n_tags_q[i] - 1]
        q_tags.append(tuple(tag_names[t] for t in [int(primary[i]), *others]))
    q_forced = rng.random(n) < cfg.signal_strength
    q_forced &= q_class != 2
    q_owner = rng.choice(n_users, n, p=user_weight)
    q_quality = rng.normal(0.3, 0.4, n)
    q_comments = rng.poisson(cfg.comments_mean, n)
    q_fav_rate = rng.gamma(1.0, 0.01, n)
    q_edit = np.where(rng.random(n) < 0.4, _ms(q_created + rng.exponential(30 * 86400e6, n).astype(np.int64)), -1)
    q_closed = np.where(rng.random(n) < cfg.closed_fraction,
                        _ms(q_created + rng.exponential(20 * 86400e6, n).astype(np.int64)), -1)
    q_title, q_body = [], []
    for i in range(n):
        terms = [w for t in q_tags[i] for w in tag_terms[t]]
        title = _sentence(rng, vocab, terms, int(rng.integers(3, 2 * cfg.words_per_title - 2)), cfg.tag_term_rate)
        q_title.append(title[:1].upper() + title[1:] + "?")
        body = "<p>" + _sentence(rng, vocab, terms, max(1, int(rng.poisson(cfg.words_per_body))), cfg.tag_term_rate) + "</p>"
        if rng.random() < cfg.code_probability:
            body += "\n<pre><code>" + _html_escape(_CODE_SNIPPETS[int(rng.integers(0, len(_CODE_SNIPPETS)))]) + "</code></pre>"
        q_body.append(body)

    # views: period 0 ends at the first dump, period p (p >= 1) spans dumps p-1..p
    n_dumps = len(dump_us)
    per_views = np.zeros((n, n_dumps), np.int64)
    if n:
        ranks = rng.permutation(n) + 1
        rate = cfg.base_views_per_month * (n / ranks) ** cfg.zipf_exponent
        m = _growth_factors(cfg, rng, q_class, q_forced, max(n_dumps - 1, 1))
        durations = np.diff(dump_us) / month_us
        born = np.searchsorted(dump_us, q_created, side="left")   # period of creation
        for p in range(n_dumps):
            mean = np.zeros(n)
            partial = born == p
            mean[partial] = rate[partial] * (dump_us[p] - q_created[partial]) / month_us
            if p >= 1:
                fresh = born == p - 1
                mean[fresh] = rate[fresh] * durations[p - 1] * m[fresh, p - 1]
            if p >= 2:
                old = born <= p - 2
                scale = durations[p - 1] / durations[p - 2]
                mean[old] = np.maximum(per_views[old, p - 1], 0.5) * scale * m[old, p - 1]
            per_views[:, p] = _negative_binomial(rng, mean, cfg.dispersion)
    views = np.cumsum(per_views, axis=1)

    # answers
    n_ans = rng.poisson(cfg.answers_mean, n)
    a_parent = np.repeat(np.arange(n), n_ans)
    n_a = len(a_parent)
    a_created = _ms(q_created[a_parent] + rng.exponential(cfg.answer_latency_hours * 3600e6, n_a).astype(np.int64) + 1000)
    a_score = np.round(rng.normal(1.0, 2.0, n_a)).astype(np.int64)
    a_comments = rng.poisson(1.0, n_a)
    a_edit = np.where(rng.random(n_a) < 0.3, _ms(a_created + rng.exponential(10 * 86400e6, n_a).astype(np.int64)), -1)
    a_owner = rng.choice(n_users, n_a, p=user_weight)
    a_body = []
    for j in range(n_a):
        terms = [w for t in q_tags[a_parent[j]] for w in tag_terms[t]]
        a_body.append("<p>" + _sentence(rng, vocab, terms, max(1, int(rng.poisson(cfg.words_per_body // 2))),
                                        cfg.tag_term_rate) + "</p>")
    q_accepted = np.full(n, -1, np.int64)
    first_answer = np.concatenate([[0], np.cumsum(n_ans)[:-1]]) if n else np.zeros(0, np.int64)
    for i in np.nonzero((n_ans > 0) & (rng.random(n) < cfg.accept_probability))[0]:
        q_accepted[i] = first_answer[i] + int(rng.integers(0, n_ans[i]))

    return World(
        cfg, dump_us, tag_names, tag_class,
        q_created, q_tags, q_class, q_forced, q_owner, q_quality, q_comments, q_fav_rate, q_edit, q_closed,
        q_accepted, q_title, q_body, views,
        a_parent, a_created, a_score, a_comments, a_edit, a_owner, a_body,
        u_created, u_rep0, u_rep_rate, u_views_rate, u_up_rate, u_down_rate,
    )


# --- snapshots ------------------------------------------------------------------


def snapshot_at(world: World, d: int) -> DumpSnapshot:
    """The records a dump published at ``world.dump_us[d]`` would contain."""
    now = int(world.dump_us[d])
    month_us = MONTH.total_seconds() * 1e6
    n = world.n_questions
    a_live = world.a_created <= now
    n_live = np.bincount(world.a_parent[a_live], minlength=n) if n else np.zeros(0, np.int64)
    last_ans = np.full(n, -1, np.int64)
    if a_live.any():
        np.maximum.at(last_ans, world.a_parent[a_live], world.a_created[a_live])
    answers = []
    for j in np.nonzero(a_live)[0]:
        created = int(world.a_created[j])
        edit = int(world.a_edit[j])
        last = edit if 0 <= edit <= now else created
        answers.append(AnswerRecord(
            id=n + j + 1, parent_question_id=int(world.a_parent[j]) + 1, creation_date=from_micros(created),
            score=int(world.a_score[j]), comment_count=int(world.a_comments[j]), body_html=world.a_body[j],
            last_activity_date=from_micros(last), owner_user_id=int(world.a_owner[j]) + 1,
        ))
    questions = []
    for i in np.nonzero(world.q_created <= now)[0]:
        created = int(world.q_created[i])
        v = int(world.views[i, d])
        edit = int(world.q_edit[i])
        last = max(created, edit if 0 <= edit <= now else created, int(last_ans[i]))
        acc = int(world.q_accepted[i])
        closed = int(world.q_closed[i])
        questions.append(QuestionRecord(
            id=int(i) + 1, creation_date=from_micros(created), score=int(math.floor(world.q_quality[i] * math.sqrt(v))),
            view_count=v, body_html=world.q_body[i], title=world.q_title[i], tags=world.q_tags[i],
            answer_count=int(n_live[i]), comment_count=int(world.q_comments[i]),
            favorite_count=int(world.q_fav_rate[i] * v), last_activity_date=from_micros(last),
            accepted_answer_id=n + acc + 1 if acc >= 0 and a_live[acc] else None,
            owner_user_id=int(world.q_owner[i]) + 1,
            closed_date=from_micros(closed) if 0 <= closed <= now else None,
        ))
    users = []
    for k in range(len(world.u_created)):
        months = (now - int(world.u_created[k])) / month_us
        users.append(UserRecord(
            id=k + 1, reputation=int(world.u_rep0[k] + world.u_rep_rate[k] * months),
            profile_views=int(world.u_views_rate[k] * months), up_votes=int(world.u_up_rate[k] * months),
            down_votes=int(world.u_down_rate[k] * months), creation_date=from_micros(int(world.u_created[k])),
        ))
    counts: dict[str, int] = {}
    for q in questions:
        for t in q.tags:
            counts[t] = counts.get(t, 0) + 1
    tags = [TagRecord(t, counts[t]) for t in world.tag_names if t in counts]
    snap = DumpSnapshot(from_micros(now), questions, answers, users, tags)
    snap.check()
    return snap


def build_snapshots(config: SynthConfig) -> list[DumpSnapshot]:
    world = build_world(config)
    return [snapshot_at(world, d) for d in range(len(world.dump_us))]


# --- ground truth ------------------------------------------------------------------


def ground_truth_labels(world: World, i: int, j: int, k: int, fraction: float = 0.15,
                        threshold: float = -0.05) -> dict[str, list[int]]:
    """Labels for the dump-index triple (i, j, k) computed straight from the view counts."""
    alive = np.nonzero(world.q_created <= world.dump_us[j])[0]
    cur = world.views[alive, j] - world.views[alive, i]
    fut = world.views[alive, k] - world.views[alive, j]
    n = len(cur)
    if n == 0:
        return {"being_forgotten": [], "unforgotten": []}
    kth = np.sort(cur)[::-1][top_count(fraction, n) - 1]
    sel = np.nonzero(cur >= kth)[0]
    growth = (fut[sel] - cur[sel]) / cur[sel]
    forgotten = growth < threshold
    ids = alive[sel] + 1
    return {"being_forgotten": ids[forgotten].tolist(), "unforgotten": ids[~forgotten].tolist()}


def manifest(world: World) -> dict:
    cfg = world.config
    labels = {}
    n_d = len(world.dump_us)
    for step in range(1, n_d):
        for i in range(0, n_d - 2 * step):
            triple = (i, i + step, i + 2 * step)
            key = ",".join(dump_label(from_micros(int(world.dump_us[t]))) for t in triple)
            labels[key] = ground_truth_labels(world, *triple)
    return {
        "config": cfg.to_dict(),
        "dumps": [dump_label(from_micros(int(t))) for t in world.dump_us],
        "planted": {
            "signal_strength": cfg.signal_strength,
            "tag_trend": dict(zip(world.tag_names, world.tag_class)),
            "forced_down": (np.nonzero(world.q_forced & (world.q_class == 0))[0] + 1).tolist(),
            "forced_up": (np.nonzero(world.q_forced & (world.q_class == 1))[0] + 1).tolist(),
            "features": ["tag identity (tf-idf over tags)", "TagPrePop_*", "TagPop_*"],
        },
        "labels": labels,
        "n_questions": world.n_questions,
        "n_answers": len(world.a_parent),
        "n_users": len(world.u_created),
    }


# --- files -----------------------------------------------------------------------


def dump_directory(out_dir: str | os.PathLike, dump_time: datetime) -> Path:
    return Path(out_dir) / f"dump-{dump_label(dump_time)}"


def generate(config: SynthConfig, out_dir: str | os.PathLike) -> dict:
    """Write one dump directory per dump time plus ``manifest.json``; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = build_world(config)
    dumps = {}
    for d in range(len(world.dump_us)):
        snap = snapshot_at(world, d)
        paths = write_dump(snap, dump_directory(out, snap.dump_time))
        dumps[dump_label(snap.dump_time)] = {k: str(p.relative_to(out)) for k, p in paths.items()}
    man = manifest(world)
    man["files"] = dumps
    write_json(out / MANIFEST, man, config.to_dict())
    return man


def load_manifest(out_dir: str | os.PathLike) -> dict:
    return json.loads((Path(out_dir) / MANIFEST).read_text())
