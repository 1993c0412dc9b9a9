"""Columnar on-disk snapshot store and cross-dump view deltas.

Layout of a store directory::

    manifest.json                 committed snapshots, format version, checksums
    snap-<label>-<digest>/        one directory per dump time, named by content hash
        questions.qcol            fixed little-endian column file
        answers.qcol
        users.qcol
        tags.qcol
        text.qcol, text.blob      raw question text, addressable by question id

A column file is a header (magic, version, row count, column directory) followed by
the column payloads.  Every payload carries a CRC32 checked on full reads.  Ids are
sorted strictly increasing on write so id lookups are binary searches.
"""
from __future__ import annotations

import fcntl
import hashlib
import json
import logging
import os
import shutil
import struct
import uuid
import zlib
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .records import DumpSnapshot, dump_label, parse_timestamp, to_micros
from .textutil import stripped_length

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = b"QFCOL\x00"
NULL = np.iinfo(np.int64).min
MANIFEST = "manifest.json"

_HEADER = struct.Struct("<6sHHQ")  # magic, version, n_columns, n_rows
_ENTRY = struct.Struct("<cQQI")    # kind, offset, nbytes, crc32

QUESTION_INT_COLUMNS = (
    "view_count", "score", "answer_count", "comment_count", "favorite_count",
    "creation_date", "last_activity_date", "owner_user_id", "accepted_answer_id",
    "closed_date", "title_len", "body_len",
)
ANSWER_INT_COLUMNS = (
    "parent_id", "score", "comment_count", "creation_date", "last_activity_date",
    "body_len", "owner_user_id",
)
USER_INT_COLUMNS = ("reputation", "profile_views", "up_votes", "down_votes", "creation_date")


class StoreError(RuntimeError):
    pass


class ChecksumError(StoreError):
    pass


class DumpInconsistency(StoreError):
    pass


# --- column files ----------------------------------------------------------


def _encode_strings(values: Sequence[str]) -> bytes:
    blobs = [v.encode("utf-8") for v in values]
    offsets = np.zeros(len(blobs) + 1, dtype="<i8")
    if blobs:
        np.cumsum([len(b) for b in blobs], out=offsets[1:])
    return offsets.tobytes() + b"".join(blobs)


def _decode_strings(payload: bytes, n_rows: int) -> list[str]:
    offsets = np.frombuffer(payload, dtype="<i8", count=n_rows + 1)
    data = payload[(n_rows + 1) * 8:]
    return [data[offsets[i]:offsets[i + 1]].decode("utf-8") for i in range(n_rows)]


def write_column_file(path: Path, n_rows: int, columns: dict[str, np.ndarray | Sequence[str]]) -> dict:
    """Write ``columns`` (int64/float64 arrays or string lists) and return their CRCs."""
    names = list(columns)
    payloads: list[tuple[bytes, bytes]] = []
    for name in names:
        col = columns[name]
        if isinstance(col, np.ndarray) and col.dtype.kind in "iu":
            kind, payload = b"q", np.ascontiguousarray(col, dtype="<i8").tobytes()
        elif isinstance(col, np.ndarray) and col.dtype.kind == "f":
            kind, payload = b"d", np.ascontiguousarray(col, dtype="<f8").tobytes()
        else:
            kind, payload = b"S", _encode_strings(list(col))
        if len(col) != n_rows:
            raise ValueError(f"column {name} has {len(col)} rows, expected {n_rows}")
        payloads.append((kind, payload))

    directory = b""
    dir_size = sum(2 + len(n.encode()) + _ENTRY.size for n in names)
    offset = _HEADER.size + dir_size
    offset += (-offset) % 8
    crcs = {}
    for name, (kind, payload) in zip(names, payloads):
        crc = zlib.crc32(payload)
        crcs[name] = crc
        raw = name.encode()
        directory += struct.pack("<H", len(raw)) + raw + _ENTRY.pack(kind, offset, len(payload), crc)
        offset += len(payload)
        offset += (-offset) % 8

    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(names), n_rows))
        fh.write(directory)
        for kind, payload in payloads:
            pad = (-fh.tell()) % 8
            fh.write(b"\x00" * pad)
            fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    return crcs


@dataclass
class _Entry:
    kind: bytes
    offset: int
    nbytes: int
    crc: int


class ColumnFile:
    """Read access to one column file; ``bytes_read`` counts payload bytes fetched."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.bytes_read = 0
        self._cache: dict[str, object] = {}
        with open(self.path, "rb") as fh:
            magic, version, n_cols, n_rows = _HEADER.unpack(fh.read(_HEADER.size))
            if magic != MAGIC:
                raise StoreError(f"{path}: not a column file")
            if version != FORMAT_VERSION:
                raise StoreError(f"{path}: unsupported format version {version}")
            self.n_rows = n_rows
            self.entries: dict[str, _Entry] = {}
            for _ in range(n_cols):
                (ln,) = struct.unpack("<H", fh.read(2))
                name = fh.read(ln).decode()
                kind, off, nbytes, crc = _ENTRY.unpack(fh.read(_ENTRY.size))
                self.entries[name] = _Entry(kind, off, nbytes, crc)

    def __len__(self) -> int:
        return self.n_rows

    @property
    def columns(self) -> list[str]:
        return list(self.entries)

    def _pread(self, offset: int, nbytes: int) -> bytes:
        fd = os.open(self.path, os.O_RDONLY)
        try:
            data = os.pread(fd, nbytes, offset)
        finally:
            os.close(fd)
        self.bytes_read += len(data)
        return data

    def read(self, name: str):
        """Full column read with checksum verification (cached)."""
        if name in self._cache:
            return self._cache[name]
        e = self.entries[name]
        payload = self._pread(e.offset, e.nbytes)
        if zlib.crc32(payload) != e.crc:
            raise ChecksumError(f"{self.path}: checksum mismatch in column {name}")
        if e.kind == b"S":
            value = _decode_strings(payload, self.n_rows)
        else:
            value = np.frombuffer(payload, dtype="<i8" if e.kind == b"q" else "<f8").copy()
            value.flags.writeable = False
        self._cache[name] = value
        return value

    def read_at(self, name: str, positions: Iterable[int]) -> np.ndarray:
        """Fetch individual numeric cells without reading the whole column."""
        e = self.entries[name]
        if e.kind == b"S":
            raise TypeError("read_at supports numeric columns only")
        dtype = "<i8" if e.kind == b"q" else "<f8"
        out = [np.frombuffer(self._pread(e.offset + 8 * int(p), 8), dtype=dtype)[0] for p in positions]
        return np.array(out, dtype=dtype)

    def find_ids(self, ids: Iterable[int], id_column: str = "id") -> np.ndarray:
        """Row positions of ``ids`` (-1 when absent) via on-disk binary search."""
        if id_column in self._cache:
            col = self._cache[id_column]
            ids = np.asarray(list(ids), dtype=np.int64)
            pos = np.searchsorted(col, ids)
            ok = (pos < len(col)) & (col[np.minimum(pos, len(col) - 1)] == ids) if len(col) else np.zeros(len(ids), bool)
            return np.where(ok, pos, -1)
        e = self.entries[id_column]
        out = []
        for target in ids:
            lo, hi = 0, self.n_rows
            while lo < hi:
                mid = (lo + hi) // 2
                v = struct.unpack("<q", self._pread(e.offset + 8 * mid, 8))[0]
                if v < target:
                    lo = mid + 1
                else:
                    hi = mid
            if lo < self.n_rows and struct.unpack("<q", self._pread(e.offset + 8 * lo, 8))[0] == target:
                out.append(lo)
            else:
                out.append(-1)
        return np.array(out, dtype=np.int64)


# --- snapshot write/read ----------------------------------------------------


def _opt(value) -> int:
    return NULL if value is None else int(value)


def _opt_ts(value) -> int:
    return NULL if value is None else to_micros(value)


def _snapshot_columns(snapshot: DumpSnapshot, keep_text: bool):
    qs = sorted(snapshot.questions, key=lambda q: q.id)
    ans = sorted(snapshot.answers, key=lambda a: a.id)
    users = sorted(snapshot.users, key=lambda u: u.id)
    tags = sorted(snapshot.tags, key=lambda t: t.name)
    for label, recs, key in (("question", qs, "id"), ("answer", ans, "id"), ("user", users, "id"), ("tag", tags, "name")):
        keys = [getattr(r, key) for r in recs]
        if any(a >= b for a, b in zip(keys, keys[1:])):
            raise ValueError(f"duplicate {label} {key} in snapshot")

    def ints(values):
        return np.fromiter(values, dtype=np.int64, count=-1)

    qcols = {
        "id": ints(q.id for q in qs),
        "view_count": ints(q.view_count for q in qs),
        "score": ints(q.score for q in qs),
        "answer_count": ints(q.answer_count for q in qs),
        "comment_count": ints(q.comment_count for q in qs),
        "favorite_count": ints(q.favorite_count for q in qs),
        "creation_date": ints(to_micros(q.creation_date) for q in qs),
        "last_activity_date": ints(to_micros(q.last_activity_date) for q in qs),
        "owner_user_id": ints(_opt(q.owner_user_id) for q in qs),
        "accepted_answer_id": ints(_opt(q.accepted_answer_id) for q in qs),
        "closed_date": ints(_opt_ts(q.closed_date) for q in qs),
        "title_len": ints(len(q.title) for q in qs),
        "body_len": ints(len(q.body_html) for q in qs),
        "tags": ["|".join(q.tags) for q in qs],
    }
    acols = {
        "id": ints(a.id for a in ans),
        "parent_id": ints(a.parent_question_id for a in ans),
        "score": ints(a.score for a in ans),
        "comment_count": ints(a.comment_count for a in ans),
        "creation_date": ints(to_micros(a.creation_date) for a in ans),
        "last_activity_date": ints(to_micros(a.last_activity_date) for a in ans),
        "body_len": ints(stripped_length(a.body_html) for a in ans),
        "owner_user_id": ints(_opt(a.owner_user_id) for a in ans),
    }
    ucols = {
        "id": ints(u.id for u in users),
        "reputation": ints(u.reputation for u in users),
        "profile_views": ints(u.profile_views for u in users),
        "up_votes": ints(u.up_votes for u in users),
        "down_votes": ints(u.down_votes for u in users),
        "creation_date": ints(to_micros(u.creation_date) for u in users),
    }
    tcols = {"name": [t.name for t in tags], "question_count": ints(t.question_count for t in tags)}
    text = None
    if keep_text:
        text = (qcols["id"], [q.title for q in qs], [q.body_html for q in qs])
    return qcols, acols, ucols, tcols, text


def _write_text(directory: Path, text) -> dict:
    ids, titles, bodies = text
    n = len(ids)
    title_off = np.zeros(n, np.int64)
    title_nb = np.zeros(n, np.int64)
    body_off = np.zeros(n, np.int64)
    body_nb = np.zeros(n, np.int64)
    crc = 0
    with open(directory / "text.blob", "wb") as fh:
        pos = 0
        for i in range(n):
            t = titles[i].encode("utf-8")
            b = bodies[i].encode("utf-8")
            title_off[i], title_nb[i] = pos, len(t)
            body_off[i], body_nb[i] = pos + len(t), len(b)
            fh.write(t)
            fh.write(b)
            crc = zlib.crc32(b, zlib.crc32(t, crc))
            pos += len(t) + len(b)
        fh.flush()
        os.fsync(fh.fileno())
    crcs = write_column_file(
        directory / "text.qcol", n,
        {"id": ids, "title_off": title_off, "title_nbytes": title_nb, "body_off": body_off, "body_nbytes": body_nb},
    )
    return {"text.qcol": crcs, "text.blob": crc}


class Snapshot:
    """Read-side handle on one committed snapshot."""

    def __init__(self, directory: Path, dump_time: datetime, has_text: bool):
        self.directory = Path(directory)
        self.dump_time = dump_time
        self.has_text = has_text
        self.questions = ColumnFile(self.directory / "questions.qcol")
        self.answers = ColumnFile(self.directory / "answers.qcol")
        self.users = ColumnFile(self.directory / "users.qcol")
        self.tags = ColumnFile(self.directory / "tags.qcol")
        self._text_index = ColumnFile(self.directory / "text.qcol") if has_text else None

    def __repr__(self) -> str:
        return f"Snapshot({dump_label(self.dump_time)}, questions={len(self.questions)})"

    @property
    def dump_micros(self) -> int:
        return to_micros(self.dump_time)

    @property
    def bytes_read(self) -> int:
        files = [self.questions, self.answers, self.users, self.tags]
        if self._text_index is not None:
            files.append(self._text_index)
        return sum(f.bytes_read for f in files)

    def question_tags(self) -> list[tuple[str, ...]]:
        return [tuple(t.split("|")) if t else () for t in self.questions.read("tags")]

    def texts(self, ids: Sequence[int]) -> list[tuple[str, str]]:
        """``(title, body_html)`` for each requested question id."""
        if self._text_index is None:
            raise StoreError("snapshot was written without raw text")
        idx = self._text_index
        idx.read("id")
        pos = idx.find_ids(ids)
        if (pos < 0).any():
            missing = [int(i) for i, p in zip(ids, pos) if p < 0]
            raise KeyError(f"no text for question(s) {missing[:5]}")
        t_off, t_nb = idx.read("title_off"), idx.read("title_nbytes")
        b_off, b_nb = idx.read("body_off"), idx.read("body_nbytes")
        out = []
        with open(self.directory / "text.blob", "rb") as fh:
            for p in pos:
                fh.seek(t_off[p])
                title = fh.read(t_nb[p]).decode("utf-8")
                fh.seek(b_off[p])
                body = fh.read(b_nb[p]).decode("utf-8")
                out.append((title, body))
        return out


@dataclass
class ViewDeltas:
    """Views gained per question between two dumps."""

    t1: datetime
    t2: datetime
    ids: np.ndarray
    views: np.ndarray
    deleted: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    n_clamped: int = 0
    n_new: int = 0

    def as_dict(self) -> dict[int, int]:
        return dict(zip(self.ids.tolist(), self.views.tolist()))


class SnapshotStore:
    """A directory of committed snapshots.  One writer, any number of readers."""

    def __init__(self, path: str | os.PathLike, *, create: bool = True):
        self.path = Path(path)
        if not self.path.exists():
            if not create:
                raise StoreError(f"no store at {self.path}")
            self.path.mkdir(parents=True)
        self._open: dict[str, Snapshot] = {}

    # manifest -----------------------------------------------------------

    def _read_manifest(self) -> dict:
        mpath = self.path / MANIFEST
        if not mpath.exists():
            return {"format_version": FORMAT_VERSION, "snapshots": {}}
        manifest = json.loads(mpath.read_text())
        if manifest.get("format_version") != FORMAT_VERSION:
            raise StoreError(f"unsupported store format {manifest.get('format_version')}")
        return manifest

    def _commit_manifest(self, manifest: dict) -> None:
        tmp = self.path / f".{MANIFEST}.{uuid.uuid4().hex[:8]}"
        tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        with open(tmp, "rb") as fh:
            os.fsync(fh.fileno())
        os.replace(tmp, self.path / MANIFEST)
        dfd = os.open(self.path, os.O_RDONLY)
        try:
            os.fsync(dfd)
        finally:
            os.close(dfd)

    def dump_times(self) -> list[datetime]:
        entries = self._read_manifest()["snapshots"].values()
        return sorted(parse_timestamp(e["dump_time"]) for e in entries)

    def manifest_entry(self, dump_time: datetime) -> dict:
        entry = self._read_manifest()["snapshots"].get(dump_label(dump_time))
        if entry is None:
            raise StoreError(f"no snapshot for dump time {dump_label(dump_time)}")
        return entry

    def snapshot(self, dump_time: datetime) -> Snapshot:
        entry = self.manifest_entry(dump_time)
        key = entry["dir"]
        if key not in self._open:
            self._open[key] = Snapshot(self.path / key, parse_timestamp(entry["dump_time"]), entry["has_text"])
        return self._open[key]

    def view_until(self, t: datetime) -> "StoreView":
        return StoreView(self, t)

    # writing ------------------------------------------------------------

    def write(self, snapshot: DumpSnapshot, *, keep_text: bool = True) -> Snapshot:
        """Persist ``snapshot``; replaces any snapshot with the same dump time atomically."""
        label = dump_label(snapshot.dump_time)
        cols = _snapshot_columns(snapshot, keep_text)
        lock_fd = os.open(self.path / ".lock", os.O_RDWR | os.O_CREAT, 0o644)
        tmp = self.path / f".tmp-{label}-{uuid.uuid4().hex[:8]}"
        try:
            fcntl.flock(lock_fd, fcntl.LOCK_EX)
            tmp.mkdir()
            qcols, acols, ucols, tcols, text = cols
            checksums = {
                "questions.qcol": write_column_file(tmp / "questions.qcol", len(qcols["id"]), qcols),
                "answers.qcol": write_column_file(tmp / "answers.qcol", len(acols["id"]), acols),
                "users.qcol": write_column_file(tmp / "users.qcol", len(ucols["id"]), ucols),
                "tags.qcol": write_column_file(tmp / "tags.qcol", len(tcols["name"]), tcols),
            }
            if text is not None:
                checksums.update(_write_text(tmp, text))
            entry = {
                "dump_time": snapshot.dump_time.isoformat(),
                "has_text": text is not None,
                "counts": {
                    "questions": len(qcols["id"]), "answers": len(acols["id"]),
                    "users": len(ucols["id"]), "tags": len(tcols["name"]),
                },
                "checksums": checksums,
            }
            # content-derived name: the same input always yields the same store bytes
            digest = hashlib.sha256(json.dumps(entry, sort_keys=True).encode()).hexdigest()[:8]
            final = f"snap-{label}-{digest}"
            manifest = self._read_manifest()
            old = manifest["snapshots"].get(label)
            if old is not None and old["dir"] == final:
                shutil.rmtree(tmp)
                return self.snapshot(snapshot.dump_time)
            if (self.path / final).exists():          # orphan of an interrupted write
                shutil.rmtree(self.path / final)
            os.rename(tmp, self.path / final)
            manifest["snapshots"][label] = {**entry, "dir": final}
            self._commit_manifest(manifest)
            if old is not None:
                self._open.pop(old["dir"], None)
                shutil.rmtree(self.path / old["dir"], ignore_errors=True)
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
        finally:
            fcntl.flock(lock_fd, fcntl.LOCK_UN)
            os.close(lock_fd)
        log.info("committed snapshot %s (%d questions)", label, len(cols[0]["id"]))
        return self.snapshot(snapshot.dump_time)


class StoreView:
    """A store restricted to snapshots at or before a cutoff (the leakage guard)."""

    def __init__(self, store: SnapshotStore, cutoff: datetime):
        self.store = store
        self.cutoff = cutoff

    def dump_times(self) -> list[datetime]:
        return [t for t in self.store.dump_times() if t <= self.cutoff]

    def snapshot(self, dump_time: datetime) -> Snapshot:
        if dump_time > self.cutoff:
            raise StoreError(f"snapshot {dump_label(dump_time)} lies after the view cutoff {dump_label(self.cutoff)}")
        return self.store.snapshot(dump_time)

    def view_until(self, t: datetime) -> "StoreView":
        return StoreView(self.store, min(t, self.cutoff))


def locate(sorted_ids: np.ndarray, wanted: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Positions of ``wanted`` in ``sorted_ids`` (clipped to a valid index) and a presence mask."""
    wanted = np.asarray(wanted, dtype=np.int64)
    if len(sorted_ids) == 0:
        return np.zeros(len(wanted), np.int64), np.zeros(len(wanted), bool)
    pos = np.minimum(np.searchsorted(sorted_ids, wanted), len(sorted_ids) - 1)
    return pos, sorted_ids[pos] == wanted


def write_snapshot(snapshot: DumpSnapshot, store_path: str | os.PathLike, *, keep_text: bool = True) -> Snapshot:
    return SnapshotStore(store_path).write(snapshot, keep_text=keep_text)


def views_between(
    store: SnapshotStore | StoreView, question_ids: Iterable[int] | None, t1: datetime, t2: datetime,
    *, strict: bool = False,
) -> ViewDeltas:
    """Views gained between dumps ``t1`` and ``t2`` for questions present at ``t2``.

    Questions absent at ``t1`` count from zero; questions present at ``t1`` but gone at
    ``t2`` are omitted and listed in ``deleted``.  A negative delta means the dumps
    disagree; it is clamped to zero and counted (or raised with ``strict``).
    """
    if not t1 < t2:
        raise ValueError("views_between needs t1 < t2")
    s1, s2 = store.snapshot(t1), store.snapshot(t2)
    if question_ids is None:
        ids2 = s2.questions.read("id")
        vc2 = s2.questions.read("view_count")
        ids1 = s1.questions.read("id")
        vc1 = s1.questions.read("view_count")
        pos, present = locate(ids1, ids2)
        base = np.where(present, vc1[pos] if len(ids1) else 0, 0)
        deleted = np.setdiff1d(ids1, ids2, assume_unique=True)
        ids = ids2.copy()
        delta = vc2 - base
        n_new = int((~present).sum())
    else:
        wanted = np.unique(np.fromiter(question_ids, dtype=np.int64))
        p2 = s2.questions.find_ids(wanted)
        p1 = s1.questions.find_ids(wanted)
        keep = p2 >= 0
        ids = wanted[keep]
        vc2 = s2.questions.read_at("view_count", p2[keep])
        p1k = p1[keep]
        vc1 = s1.questions.read_at("view_count", p1k[p1k >= 0])
        base = np.zeros(len(ids), np.int64)
        base[p1k >= 0] = vc1
        delta = vc2 - base
        deleted = wanted[(~keep) & (p1 >= 0)]
        n_new = int((p1k < 0).sum())
    negative = delta < 0
    n_clamped = int(negative.sum())
    if n_clamped:
        if strict:
            bad = ids[negative][:5].tolist()
            raise DumpInconsistency(f"view counts decreased between dumps for questions {bad}")
        log.warning("clamped %d negative view deltas between %s and %s", n_clamped, dump_label(t1), dump_label(t2))
        delta = np.where(negative, 0, delta)
    return ViewDeltas(t1, t2, ids, delta.astype(np.int64), deleted.astype(np.int64), n_clamped, n_new)

