"""Record factories and small hand-built stores shared by the tests."""
from __future__ import annotations

from datetime import datetime, timedelta, timezone

import numpy as np

from qforget.records import AnswerRecord, DumpSnapshot, QuestionRecord, TagRecord, UserRecord
from qforget.store import SnapshotStore

UTC = timezone.utc
T0 = datetime(2019, 1, 1, tzinfo=UTC)


def months(k: float) -> timedelta:
    return timedelta(days=30.44 * k)


def question(id, created=None, views=0, tags=("python",), **kw) -> QuestionRecord:
    created = created or T0 - timedelta(days=400)
    return QuestionRecord(
        id=id, creation_date=created, score=kw.pop("score", 0), view_count=views,
        body_html=kw.pop("body_html", "<p>body</p>"), title=kw.pop("title", "title"), tags=tuple(tags),
        answer_count=kw.pop("answer_count", 0), comment_count=kw.pop("comment_count", 0),
        favorite_count=kw.pop("favorite_count", 0), last_activity_date=kw.pop("last_activity_date", created),
        **kw,
    )


def answer(id, parent, created, score=0, **kw) -> AnswerRecord:
    return AnswerRecord(
        id=id, parent_question_id=parent, creation_date=created, score=score,
        comment_count=kw.pop("comment_count", 0), body_html=kw.pop("body_html", ""),
        last_activity_date=kw.pop("last_activity_date", created), **kw,
    )


def user(id, reputation=1, **kw) -> UserRecord:
    return UserRecord(
        id=id, reputation=reputation, profile_views=kw.pop("profile_views", 0), up_votes=kw.pop("up_votes", 0),
        down_votes=kw.pop("down_votes", 0), creation_date=kw.pop("creation_date", T0 - timedelta(days=900)),
    )


def snapshot(dump_time, questions=(), answers=(), users=(), tags=None) -> DumpSnapshot:
    if tags is None:
        counts: dict[str, int] = {}
        for q in questions:
            for t in q.tags:
                counts[t] = counts.get(t, 0) + 1
        tags = [TagRecord(t, c) for t, c in sorted(counts.items())]
    return DumpSnapshot(dump_time, list(questions), list(answers), list(users), list(tags))


def views_store(path, view_table: dict[int, list[int | None]], times, created=None) -> SnapshotStore:
    """Store whose question ``q`` has cumulative views ``view_table[q][d]`` at dump ``d``.

    ``None`` means the question is absent from that dump.
    """
    store = SnapshotStore(path)
    for d, t in enumerate(times):
        qs = [
            question(q, created=(created or {}).get(q), views=v[d])
            for q, v in sorted(view_table.items()) if v[d] is not None
        ]
        store.write(snapshot(t, qs))
    return store


def random_view_table(rng: np.random.Generator, n: int, n_dumps: int = 3, p_new=0.1, p_deleted=0.05,
                      tie_prone=False) -> dict[int, list[int | None]]:
    """Cumulative views that never decrease; some questions appear late or vanish."""
    table = {}
    for q in range(1, n + 1):
        start = 0 if rng.random() > p_new else int(rng.integers(1, n_dumps))
        stop = n_dumps if rng.random() > p_deleted else int(rng.integers(start + 1, n_dumps + 1))
        if tie_prone:
            gains = rng.integers(0, 6, n_dumps) * 10
        else:
            gains = rng.integers(0, 500, n_dumps)
        cum = np.cumsum(gains)
        table[q] = [int(cum[d]) if start <= d < stop else None for d in range(n_dumps)]
    return table
