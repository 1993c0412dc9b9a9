"""Question-, answer-, user-, tag- and text-based features as of the prediction time.

Every extractor reads a single snapshot, the one published at the prediction time,
through a :class:`~qforget.store.StoreView` cut off at that time, so no feature can
see later dumps.  Missing values are NaN and are handed to the tree learner as-is.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass
from datetime import datetime
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from ._io import write_table
from .cohort import MONTH, CohortDataset
from .pos import pos_counts
from .records import to_micros
from .store import NULL, SnapshotStore, StoreView, locate
from .text import TEXT_FIELDS, TextModel, field_text
from .textutil import split_html

log = logging.getLogger(__name__)

MISSING = np.nan
US_PER_MINUTE = 60_000_000
US_PER_DAY = 86_400_000_000
US_PER_MONTH = MONTH.total_seconds() * 1_000_000
MAX_TAGS = 5
PREVIOUS_PERIODS = 4

GROUPS = ("question", "answer", "user", "tag", "text")

QUESTION_FEATURES = (
    "ageByCreDate", "ageByLastAct", "score", "viewCount", "commentCount", "answerCount",
    "bodyLen", "codeLen", "titleLen", "nOfVerbs", "nOfPRP", "nOfNouns",
)
_ANSWER_KINDS = ("First", "Best", "Last")
ANSWER_FEATURES = tuple(
    [f"{k}AnsScore" for k in _ANSWER_KINDS]
    + [f"{k}AnsComCount" for k in _ANSWER_KINDS]
    + [f"{k}AnsBodyLen" for k in _ANSWER_KINDS]
    + [f"TimeToGet{k}Ans" for k in _ANSWER_KINDS]
    + [f"TimeTo{k}AnsLastActDate" for k in _ANSWER_KINDS]
)
USER_FEATURES = ("userRep", "UserViews", "UserUpVote", "UserDownVote")
TAG_FEATURES = tuple(
    [f"TagExistTime_{q}" for q in range(1, MAX_TAGS + 1)]
    + [f"TagPop_{q}" for q in range(1, MAX_TAGS + 1)]
    + [f"TagActiveTime_{q}" for q in range(1, MAX_TAGS + 1)]
    + [f"TagPrePop_{k}_{q}" for k in range(1, PREVIOUS_PERIODS + 1) for q in range(1, MAX_TAGS + 1)]
)
DENSE_FEATURES = {
    "question": QUESTION_FEATURES,
    "answer": ANSWER_FEATURES,
    "user": USER_FEATURES,
    "tag": TAG_FEATURES,
}


class FeatureError(RuntimeError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    group: str
    kind: str = "numeric"            # or "sparse-text-weight"
    missing: str = "nan-native"      # NaN routed by the learner; "none" for text weights


@dataclass
class FeatureMatrix:
    """Rows aligned with a dataset's question order; dense block then sparse text block."""

    schema: list[FeatureSpec]
    question_ids: np.ndarray
    dense: np.ndarray
    sparse: sp.csr_matrix = None

    def __post_init__(self):
        n = len(self.question_ids)
        if self.sparse is None:
            self.sparse = sp.csr_matrix((n, 0))
        if self.dense.shape != (n, self.n_dense):
            raise ValueError(f"dense block shape {self.dense.shape} does not match schema")
        if self.sparse.shape != (n, len(self.schema) - self.n_dense):
            raise ValueError("sparse block shape does not match schema")
        names = [s.name for s in self.schema]
        if len(set(names)) != len(names):
            raise ValueError("feature names must be unique")
        if np.isinf(self.dense).any():
            raise ValueError("dense block contains infinities")

    @property
    def n_dense(self) -> int:
        return sum(1 for s in self.schema if s.kind == "numeric")

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.schema]

    @property
    def n_rows(self) -> int:
        return len(self.question_ids)

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_rows, len(self.schema)

    def groups(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for s in self.schema:
            out.setdefault(s.group, []).append(s.name)
        return out

    def column(self, j: int) -> np.ndarray:
        if j < self.n_dense:
            return self.dense[:, j]
        return self.sparse[:, j - self.n_dense].toarray().ravel()

    def rows(self, idx: np.ndarray) -> "FeatureMatrix":
        return FeatureMatrix(self.schema, self.question_ids[idx], self.dense[idx], self.sparse[idx])

    def save(self, directory: str | os.PathLike) -> Path:
        """Schema JSON, little-endian dense block, and (row, col, value) sparse triplets."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "schema.json").write_text(json.dumps({
            "n_rows": self.n_rows,
            "features": [asdict(s) for s in self.schema],
        }, indent=2) + "\n")
        np.ascontiguousarray(self.question_ids, "<i8").tofile(d / "question_ids.bin")
        np.ascontiguousarray(self.dense, "<f8").tofile(d / "dense.bin")
        coo = self.sparse.tocoo()
        triplets = np.empty(coo.nnz, dtype=[("row", "<i8"), ("col", "<i8"), ("value", "<f8")])
        triplets["row"], triplets["col"], triplets["value"] = coo.row, coo.col, coo.data
        triplets.tofile(d / "sparse.bin")
        return d

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "FeatureMatrix":
        d = Path(directory)
        meta = json.loads((d / "schema.json").read_text())
        schema = [FeatureSpec(**s) for s in meta["features"]]
        n = meta["n_rows"]
        n_dense = sum(1 for s in schema if s.kind == "numeric")
        ids = np.fromfile(d / "question_ids.bin", "<i8")
        dense = np.fromfile(d / "dense.bin", "<f8").reshape(n, n_dense)
        trip = np.fromfile(d / "sparse.bin", dtype=[("row", "<i8"), ("col", "<i8"), ("value", "<f8")])
        sparse = sp.coo_matrix((trip["value"], (trip["row"], trip["col"])), shape=(n, len(schema) - n_dense)).tocsr()
        return cls(schema, ids, dense, sparse)

    def to_csv(self, path: str | os.PathLike, config=None) -> Path:
        """Dense block only, one row per question; NaN cells are left empty."""
        names = [s.name for s in self.schema[: self.n_dense]]
        rows = ([int(q), *r.tolist()] for q, r in zip(self.question_ids, self.dense))
        return write_table(path, ["question_id", *names], rows, config or {"features": names})


# --- per-snapshot context ---------------------------------------------------


class FeatureContext:
    """Column arrays and tag statistics of the snapshot at ``prediction_time``."""

    def __init__(self, store: SnapshotStore | StoreView, prediction_time: datetime, gap_months: int):
        self.view = store.view_until(prediction_time)
        self.snapshot = self.view.snapshot(prediction_time)
        self.prediction_time = prediction_time
        self.now = to_micros(prediction_time)
        self.gap_months = gap_months
        self.anomalies = 0

        q = self.snapshot.questions
        self.q_ids = q.read("id")
        self.q_cols = {name: q.read(name) for name in (
            "creation_date", "last_activity_date", "score", "view_count", "comment_count",
            "answer_count", "owner_user_id", "accepted_answer_id",
        )}
        self.q_tags = self.snapshot.question_tags()

        a = self.snapshot.answers
        order = np.lexsort((a.read("id"), a.read("creation_date"), a.read("parent_id")))
        self.a_parent = a.read("parent_id")[order]
        self.a_cols = {name: a.read(name)[order] for name in (
            "id", "score", "comment_count", "body_len", "creation_date", "last_activity_date",
        )}

        u = self.snapshot.users
        self.u_ids = u.read("id")
        self.u_cols = {name: u.read(name) for name in ("reputation", "profile_views", "up_votes", "down_votes")}

        self._build_tag_stats()

    def _build_tag_stats(self) -> None:
        created = self.q_cols["creation_date"]
        names: dict[str, int] = {}
        codes, times = [], []
        for tags, c in zip(self.q_tags, created):
            for t in set(tags):
                codes.append(names.setdefault(t, len(names)))
                times.append(c)
        self.tag_index = names
        n_tags = len(names)
        codes_a = np.array(codes, np.int64)
        times_a = np.array(times, np.int64)
        keep = times_a <= self.now
        codes_a, times_a = codes_a[keep], times_a[keep]
        self.tag_first = np.full(n_tags, np.iinfo(np.int64).max, np.int64)
        self.tag_last = np.full(n_tags, np.iinfo(np.int64).min, np.int64)
        np.minimum.at(self.tag_first, codes_a, times_a)
        np.maximum.at(self.tag_last, codes_a, times_a)
        self.tag_pop = np.bincount(codes_a, minlength=n_tags)
        gap_us = self.gap_months * US_PER_MONTH
        self.tag_prepop = np.zeros((PREVIOUS_PERIODS, n_tags), np.int64)
        for k in range(1, PREVIOUS_PERIODS + 1):
            lo, hi = self.now - k * gap_us, self.now - (k - 1) * gap_us
            in_window = (times_a > lo) & (times_a <= hi)
            self.tag_prepop[k - 1] = np.bincount(codes_a[in_window], minlength=n_tags)

    def positions(self, question_ids: Sequence[int]) -> np.ndarray:
        pos, present = locate(self.q_ids, np.asarray(question_ids, np.int64))
        if not present.all():
            missing = np.asarray(question_ids)[~present][:5].tolist()
            raise FeatureError(f"question(s) {missing} absent from the snapshot at the prediction time")
        return pos

    # extractors ----------------------------------------------------------

    def question_block(self, question_ids: Sequence[int]) -> np.ndarray:
        pos = self.positions(question_ids)
        c = self.q_cols
        out = np.empty((len(pos), len(QUESTION_FEATURES)), np.float64)
        out[:, 0] = (self.now - c["creation_date"][pos]) / US_PER_MONTH
        out[:, 1] = np.maximum(self.now - c["last_activity_date"][pos], 0) / US_PER_MONTH
        out[:, 2] = c["score"][pos]
        out[:, 3] = c["view_count"][pos]
        out[:, 4] = c["comment_count"][pos]
        out[:, 5] = c["answer_count"][pos]
        for i, (title, body) in enumerate(self.snapshot.texts(list(question_ids))):
            prose, code = split_html(body)
            out[i, 6] = len(prose) + len(code)
            out[i, 7] = len(code)
            out[i, 8] = len(title)
            out[i, 9:12] = pos_counts(title + "\n" + prose)
        return out

    def answer_block(self, question_ids: Sequence[int]) -> np.ndarray:
        pos = self.positions(question_ids)
        out = np.full((len(pos), len(ANSWER_FEATURES)), MISSING)
        a = self.a_cols
        starts = np.searchsorted(self.a_parent, self.q_ids[pos], side="left")
        ends = np.searchsorted(self.a_parent, self.q_ids[pos], side="right")
        for i, (p, s, e) in enumerate(zip(pos, starts, ends)):
            sel = np.arange(s, e)
            sel = sel[a["creation_date"][sel] <= self.now]
            if len(sel) == 0:
                continue
            first, last = sel[0], sel[-1]
            accepted = self.q_cols["accepted_answer_id"][p]
            hit = sel[a["id"][sel] == accepted] if accepted != NULL else sel[:0]
            if len(hit):
                best = hit[0]
            else:
                # highest score; ties go to the earliest answer (sel is creation-ordered)
                best = sel[int(np.argmax(a["score"][sel]))]
            q_created = self.q_cols["creation_date"][p]
            if a["creation_date"][first] < q_created:
                self.anomalies += 1
            for k, idx in enumerate((first, best, last)):
                wait = max(a["creation_date"][idx] - q_created, 0)
                out[i, k] = a["score"][idx]
                out[i, 3 + k] = a["comment_count"][idx]
                out[i, 6 + k] = a["body_len"][idx]
                out[i, 9 + k] = wait / US_PER_MINUTE
                out[i, 12 + k] = max(a["last_activity_date"][idx] - a["creation_date"][idx], 0) / US_PER_MINUTE
        return out

    def user_block(self, question_ids: Sequence[int]) -> np.ndarray:
        pos = self.positions(question_ids)
        owners = self.q_cols["owner_user_id"][pos]
        upos, present = locate(self.u_ids, owners)
        present &= owners != NULL
        out = np.full((len(pos), len(USER_FEATURES)), MISSING)
        for j, name in enumerate(("reputation", "profile_views", "up_votes", "down_votes")):
            col = self.u_cols[name]
            if len(col):
                out[present, j] = col[upos[present]]
        return out

    def tag_block(self, question_ids: Sequence[int]) -> np.ndarray:
        pos = self.positions(question_ids)
        out = np.full((len(pos), len(TAG_FEATURES)), MISSING)
        for i, p in enumerate(pos):
            for slot, tag in enumerate(self.q_tags[p][:MAX_TAGS]):
                code = self.tag_index.get(tag)
                if code is None or self.tag_pop[code] == 0:
                    raise FeatureError(f"tag {tag!r} has no use at or before the prediction time")
                first, last = self.tag_first[code], self.tag_last[code]
                out[i, slot] = (self.now - first) / US_PER_DAY
                out[i, MAX_TAGS + slot] = self.tag_pop[code]
                out[i, 2 * MAX_TAGS + slot] = (last - first) / US_PER_DAY
                for k in range(PREVIOUS_PERIODS):
                    out[i, 3 * MAX_TAGS + k * MAX_TAGS + slot] = self.tag_prepop[k, code]
        return out

    def block(self, group: str, question_ids: Sequence[int]) -> np.ndarray:
        return {
            "question": self.question_block,
            "answer": self.answer_block,
            "user": self.user_block,
            "tag": self.tag_block,
        }[group](question_ids)

    def documents(self, question_ids: Sequence[int], fields: Iterable[str] = TEXT_FIELDS) -> dict[str, list[str]]:
        pos = self.positions(question_ids)
        texts = self.snapshot.texts(list(question_ids))
        docs: dict[str, list[str]] = {f: [] for f in fields}
        for p, (title, body) in zip(pos, texts):
            for f in docs:
                docs[f].append(field_text(f, title, body, self.q_tags[p]))
        return docs


def _as_map(names: Sequence[str], row: np.ndarray) -> dict[str, float]:
    return {n: float(v) for n, v in zip(names, row)}


def extract_question_features(store, question_id: int, prediction_time: datetime, gap_months: int = 6) -> dict[str, float]:
    ctx = FeatureContext(store, prediction_time, gap_months)
    return _as_map(QUESTION_FEATURES, ctx.question_block([question_id])[0])


def extract_answer_features(store, question_id: int, prediction_time: datetime, gap_months: int = 6) -> dict[str, float]:
    ctx = FeatureContext(store, prediction_time, gap_months)
    return _as_map(ANSWER_FEATURES, ctx.answer_block([question_id])[0])


def extract_user_features(store, question_id: int, prediction_time: datetime, gap_months: int = 6) -> dict[str, float]:
    ctx = FeatureContext(store, prediction_time, gap_months)
    return _as_map(USER_FEATURES, ctx.user_block([question_id])[0])


def extract_tag_features(store, question_id: int, prediction_time: datetime, gap_months: int) -> dict[str, float]:
    ctx = FeatureContext(store, prediction_time, gap_months)
    return _as_map(TAG_FEATURES, ctx.tag_block([question_id])[0])


def dense_schema(groups: Iterable[str]) -> list[FeatureSpec]:
    return [FeatureSpec(n, g) for g in GROUPS if g in set(groups) and g != "text" for n in DENSE_FEATURES[g]]


def assemble(
    question_ids: np.ndarray, dense_blocks: dict[str, np.ndarray], groups: Iterable[str],
    text_model: TextModel | None = None, docs: dict[str, list[str]] | None = None,
    text_fields: Sequence[str] = TEXT_FIELDS,
) -> FeatureMatrix:
    """Combine precomputed dense group blocks and (optionally) tf-idf weights."""
    groups = set(groups)
    unknown = groups - set(GROUPS)
    if unknown:
        raise FeatureError(f"unknown feature group(s) {sorted(unknown)}")
    schema = dense_schema(groups)
    parts = [dense_blocks[g] for g in GROUPS if g in groups and g != "text"]
    dense = np.hstack(parts) if parts else np.zeros((len(question_ids), 0))
    sparse = None
    if "text" in groups:
        if text_model is None:
            raise FeatureError("the text group needs a fitted TextModel")
        sparse = text_model.transform(docs, text_fields)
        schema += [FeatureSpec(n, "text", "sparse-text-weight", "none") for n in text_model.feature_names(text_fields)]
    return FeatureMatrix(schema, np.asarray(question_ids, np.int64), dense, sparse)


def build_feature_matrix(
    store: SnapshotStore | StoreView, dataset: CohortDataset, groups: Iterable[str],
    text_model: TextModel | None = None, text_fields: Sequence[str] = TEXT_FIELDS,
    context: FeatureContext | None = None,
) -> FeatureMatrix:
    groups = set(groups)
    if "text" in groups and text_model is None:
        raise FeatureError("the text group needs a fitted TextModel")
    ctx = context or FeatureContext(store, dataset.prediction_time, dataset.config.gap_months)
    ids = dataset.question_ids
    blocks = {g: ctx.block(g, ids) for g in GROUPS if g in groups and g != "text"}
    docs = ctx.documents(ids, text_fields) if "text" in groups else None
    return assemble(ids, blocks, groups, text_model, docs, text_fields)
