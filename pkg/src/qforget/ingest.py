"""Streaming parsers for Stack Exchange dump files (Posts, Users, Tags).

Dump files are a flat list of self-closing ``<row .../>`` elements, so instead of a
general XML parser we run a small pull tokenizer that only ever holds one read chunk
plus the row currently being scanned.  Memory use is therefore bounded by the
largest row, not by the file.
"""
from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime
import os
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator

from .records import (
    AnswerRecord, DumpSnapshot, QuestionRecord, TagRecord, UserRecord, format_timestamp, parse_timestamp,
)

log = logging.getLogger(__name__)

CHUNK_SIZE = 1 << 16
MAX_ROW_BYTES = 64 << 20

# An element ends at the first '>' that is not inside a quoted attribute value.
_TAG_END = re.compile(rb"""[^"'>]*(?:(?:"[^"]*"|'[^']*')[^"'>]*)*>""")
_ATTR = re.compile(rb"""\s+([A-Za-z_:][-\w.:]*)\s*=\s*(?:"([^"<]*)"|'([^'<]*)')""")
_ATTR_LIST = re.compile(rb"""(?:\s+[A-Za-z_:][-\w.:]*\s*=\s*(?:"[^"<]*"|'[^'<]*'))*\s*/?\s*""")
_ENTITY = re.compile(r"&([^;&\s]*);?")
_NAMED = {"lt": "<", "gt": ">", "amp": "&", "quot": '"', "apos": "'"}
_COMMON = {
    "&lt;": "<", "&gt;": ">", "&quot;": '"', "&apos;": "'",
    "&#xA;": "\n", "&#xD;": "\r", "&#x9;": "\t", "&#10;": "\n", "&#13;": "\r", "&amp;": "&",
}
_WS = str.maketrans({"\t": " ", "\n": " ", "\r": " "})
_BRACKET_TAGS = re.compile(r"<([^<>]*)>")


class DumpFormatError(ValueError):
    """Raised in strict mode for a malformed row; carries the row's byte offset."""

    def __init__(self, offset: int, message: str):
        super().__init__(f"byte {offset}: {message}")
        self.offset = offset
        self.message = message


@dataclass(frozen=True)
class ParseWarning:
    offset: int
    message: str


@dataclass
class ParseReport:
    """Counters collected while parsing one file."""

    rows: int = 0
    records: int = 0
    skipped_types: Counter = field(default_factory=Counter)
    warnings: list[ParseWarning] = field(default_factory=list)
    max_kept_warnings: int = 1000
    n_warnings: int = 0

    @property
    def n_skipped_types(self) -> int:
        return sum(self.skipped_types.values())

    def warn(self, offset: int, message: str) -> None:
        self.n_warnings += 1
        if len(self.warnings) < self.max_kept_warnings:
            self.warnings.append(ParseWarning(offset, message))
        log.warning("skipped row at byte %d: %s", offset, message)


class _Malformed(Exception):
    pass


def decode_entities(text: str) -> str:
    """Decode the XML predefined entities and numeric character references."""
    if "&" not in text:
        return text
    if text.count("&") == sum(text.count(e) for e in _COMMON):
        # fast path: only common entities present; '&amp;' must be decoded last
        for ent, ch in _COMMON.items():
            text = text.replace(ent, ch)
        return text

    def sub(m: re.Match) -> str:
        name = m.group(1)
        if not m.group(0).endswith(";"):
            raise _Malformed(f"unterminated entity {m.group(0)!r}")
        if name in _NAMED:
            return _NAMED[name]
        try:
            if name.startswith("#x") or name.startswith("#X"):
                return chr(int(name[2:], 16))
            if name.startswith("#"):
                return chr(int(name[1:]))
        except (ValueError, OverflowError):
            pass
        raise _Malformed(f"unknown entity &{name};")

    return _ENTITY.sub(sub, text)


def encode_attribute(text: str) -> str:
    """Inverse of attribute decoding; used by writers of dump-format files."""
    return (
        text.replace("&", "&amp;")
        .replace("<", "&lt;")
        .replace(">", "&gt;")
        .replace('"', "&quot;")
        .replace("\n", "&#xA;")
        .replace("\r", "&#xD;")
        .replace("\t", "&#x9;")
    )


def _parse_attributes(content: bytes) -> dict[str, str]:
    if _ATTR_LIST.fullmatch(content) is None:
        raise _Malformed(f"unparseable attribute text {content[:60]!r}")
    attrs: dict[str, str] = {}
    for name, dq, sq in _ATTR.findall(content):
        key = name.decode("ascii")
        if key in attrs:
            raise _Malformed(f"duplicate attribute {key}")
        raw = dq if dq or not sq else sq
        try:
            value = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise _Malformed(f"invalid UTF-8 in {key}") from None
        if "&" in value or "\n" in value or "\t" in value or "\r" in value:
            value = decode_entities(value.translate(_WS))
        attrs[key] = value
    return attrs


def iter_rows(
    stream: BinaryIO, report: ParseReport | None = None, *, strict: bool = False,
    chunk_size: int = CHUNK_SIZE, max_row_bytes: int = MAX_ROW_BYTES,
) -> Iterator[tuple[int, dict[str, str]]]:
    """Yield ``(byte_offset, attributes)`` for every ``row`` element in the stream."""
    report = report if report is not None else ParseReport()
    buf = b""
    base = 0  # absolute offset of buf[0]
    pos = 0
    eof = False

    def problem(offset: int, message: str) -> None:
        if strict:
            raise DumpFormatError(offset, message)
        report.warn(offset, message)

    while True:
        lt = buf.find(b"<", pos)
        if lt < 0 or (len(buf) - lt < 5 and not eof):
            if eof:
                return
            keep = lt if lt >= 0 else len(buf)
            buf, base, pos, eof = _refill(stream, buf, base, keep, chunk_size)
            continue

        head = buf[lt:lt + 5]
        if head.startswith(b"<!--"):
            end = buf.find(b"-->", lt + 4)
            if end < 0:
                if eof:
                    problem(base + lt, "unterminated comment")
                    return
                buf, base, pos, eof = _refill(stream, buf, base, lt, chunk_size)
                continue
            pos = end + 3
            continue

        is_row = head[:4] == b"<row" and head[4:5] in (b" ", b"\t", b"\n", b"\r", b"/", b">")
        m = _TAG_END.match(buf, lt + 1)
        if m is None:
            if eof:
                problem(base + lt, "truncated element at end of file")
                return
            if len(buf) - lt > max_row_bytes:
                problem(base + lt, f"element exceeds {max_row_bytes} bytes; resynchronising")
                pos = lt + 1
                continue
            buf, base, pos, eof = _refill(stream, buf, base, lt, chunk_size)
            continue

        if not is_row:
            pos = m.end()
            continue

        report.rows += 1
        content = buf[lt + 4:m.end() - 1]
        try:
            attrs = _parse_attributes(content)
        except _Malformed as exc:
            problem(base + lt, str(exc))
            nxt = buf.find(b"<row", lt + 4, m.end())
            pos = nxt if nxt >= 0 else m.end()
            continue
        pos = m.end()
        yield base + lt, attrs


def _refill(stream: BinaryIO, buf: bytes, base: int, start: int, chunk_size: int):
    chunk = stream.read(max(chunk_size, len(buf) - start))
    buf = buf[start:] + chunk
    return buf, base + start, 0, not chunk


# --- typed field access -----------------------------------------------------


def _int(attrs: dict[str, str], name: str, default: int | None = 0) -> int | None:
    raw = attrs.get(name)
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise _Malformed(f"{name}={raw!r} is not an integer") from None


def _ts(attrs: dict[str, str], name: str, default: datetime | None = None) -> datetime | None:
    raw = attrs.get(name)
    if raw is None or raw == "":
        return default
    try:
        return parse_timestamp(raw)
    except ValueError:
        raise _Malformed(f"{name}={raw!r} is not a timestamp") from None


def split_tags(raw: str) -> tuple[str, ...]:
    """Normalize either ``<a><b>`` or ``|a|b|`` tag encodings to an ordered tuple."""
    raw = raw.strip()
    if not raw:
        return ()
    if raw.startswith("<"):
        parts = _BRACKET_TAGS.findall(raw)
    elif "|" in raw:
        parts = raw.split("|")
    else:
        parts = raw.split()
    return tuple(p.strip().lower() for p in parts if p.strip())


def _typed_rows(stream, report, strict, build, mandatory):
    for offset, attrs in iter_rows(stream, report, strict=strict):
        missing = [name for name in mandatory if not attrs.get(name)]
        if missing:
            report.warn(offset, f"missing mandatory attribute(s) {', '.join(missing)}")
            continue
        try:
            rec = build(attrs)
            if rec is None:
                continue
            rec.check()
        except (_Malformed, ValueError) as exc:
            if strict:
                raise DumpFormatError(offset, str(exc)) from None
            report.warn(offset, str(exc))
            continue
        report.records += 1
        yield rec


def parse_posts(
    stream: BinaryIO, dump_time: datetime, *, report: ParseReport | None = None, strict: bool = False,
) -> Iterator[QuestionRecord | AnswerRecord]:
    """Yield questions (PostTypeId 1) and answers (PostTypeId 2) in file order.

    Other post types are counted in ``report.skipped_types``.  Rows created after
    ``dump_time`` are rejected with a warning.
    """
    report = report if report is not None else ParseReport()

    def build(a: dict[str, str]):
        post_type = _int(a, "PostTypeId")
        created = _ts(a, "CreationDate")
        if created > dump_time:
            raise _Malformed("CreationDate is after the dump time")
        if post_type == 1:
            return QuestionRecord(
                id=_int(a, "Id"),
                creation_date=created,
                score=_int(a, "Score"),
                view_count=_int(a, "ViewCount"),
                body_html=a.get("Body", ""),
                title=a.get("Title", ""),
                tags=split_tags(a.get("Tags", "")),
                answer_count=_int(a, "AnswerCount"),
                comment_count=_int(a, "CommentCount"),
                favorite_count=_int(a, "FavoriteCount"),
                last_activity_date=_ts(a, "LastActivityDate", created),
                accepted_answer_id=_int(a, "AcceptedAnswerId", None),
                owner_user_id=_int(a, "OwnerUserId", None),
                closed_date=_ts(a, "ClosedDate"),
            )
        if post_type == 2:
            parent = _int(a, "ParentId", None)
            if parent is None:
                raise _Malformed("answer without ParentId")
            return AnswerRecord(
                id=_int(a, "Id"),
                parent_question_id=parent,
                creation_date=created,
                score=_int(a, "Score"),
                comment_count=_int(a, "CommentCount"),
                body_html=a.get("Body", ""),
                last_activity_date=_ts(a, "LastActivityDate", created),
                owner_user_id=_int(a, "OwnerUserId", None),
            )
        report.skipped_types[post_type] += 1
        return None

    yield from _typed_rows(stream, report, strict, build, ("Id", "PostTypeId", "CreationDate"))


def parse_users(
    stream: BinaryIO, *, report: ParseReport | None = None, strict: bool = False,
) -> Iterator[UserRecord]:
    report = report if report is not None else ParseReport()

    def build(a: dict[str, str]) -> UserRecord:
        return UserRecord(
            id=_int(a, "Id"),
            reputation=_int(a, "Reputation"),
            profile_views=_int(a, "Views"),
            up_votes=_int(a, "UpVotes"),
            down_votes=_int(a, "DownVotes"),
            creation_date=_ts(a, "CreationDate"),
        )

    yield from _typed_rows(stream, report, strict, build, ("Id", "CreationDate"))


def parse_tags(
    stream: BinaryIO, *, report: ParseReport | None = None, strict: bool = False,
) -> Iterator[TagRecord]:
    report = report if report is not None else ParseReport()

    def build(a: dict[str, str]) -> TagRecord:
        return TagRecord(name=a["TagName"].strip().lower(), question_count=_int(a, "Count"))

    yield from _typed_rows(stream, report, strict, build, ("TagName",))


# --- whole dumps ------------------------------------------------------------------

DUMP_FILES = {"posts": "Posts.xml", "users": "Users.xml", "tags": "Tags.xml"}


def read_dump(
    posts: str | os.PathLike, users: str | os.PathLike, tags: str | os.PathLike, dump_time: datetime,
    *, strict: bool = False,
) -> tuple[DumpSnapshot, dict[str, ParseReport]]:
    """Parse the three files of one dump into a :class:`DumpSnapshot`."""
    reports = {k: ParseReport() for k in DUMP_FILES}
    snap = DumpSnapshot(dump_time)
    with open(posts, "rb") as fh:
        for rec in parse_posts(fh, dump_time, report=reports["posts"], strict=strict):
            (snap.questions if isinstance(rec, QuestionRecord) else snap.answers).append(rec)
    with open(users, "rb") as fh:
        snap.users.extend(parse_users(fh, report=reports["users"], strict=strict))
    with open(tags, "rb") as fh:
        snap.tags.extend(parse_tags(fh, report=reports["tags"], strict=strict))
    return snap, reports


def _row(fields: Iterable[tuple[str, object]]) -> str:
    parts = []
    for name, value in fields:
        if value is None:
            continue
        if isinstance(value, datetime):
            value = format_timestamp(value)
        parts.append(f'{name}="{encode_attribute(str(value))}"')
    return "  <row " + " ".join(parts) + " />\n"


def _write_rows(path: Path, root: str, rows: Iterable[str]) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write('<?xml version="1.0" encoding="utf-8"?>\n')
        fh.write(f"<{root}>\n")
        for row in rows:
            fh.write(row)
        fh.write(f"</{root}>\n")
    os.replace(tmp, path)


def question_row(q: QuestionRecord) -> str:
    return _row((
        ("Id", q.id), ("PostTypeId", 1), ("AcceptedAnswerId", q.accepted_answer_id),
        ("CreationDate", q.creation_date), ("Score", q.score), ("ViewCount", q.view_count),
        ("Body", q.body_html), ("OwnerUserId", q.owner_user_id), ("LastActivityDate", q.last_activity_date),
        ("Title", q.title), ("Tags", "".join(f"<{t}>" for t in q.tags)), ("AnswerCount", q.answer_count),
        ("CommentCount", q.comment_count), ("FavoriteCount", q.favorite_count), ("ClosedDate", q.closed_date),
    ))


def answer_row(a: AnswerRecord) -> str:
    return _row((
        ("Id", a.id), ("PostTypeId", 2), ("ParentId", a.parent_question_id), ("CreationDate", a.creation_date),
        ("Score", a.score), ("Body", a.body_html), ("OwnerUserId", a.owner_user_id),
        ("LastActivityDate", a.last_activity_date), ("CommentCount", a.comment_count),
    ))


def user_row(u: UserRecord) -> str:
    return _row((
        ("Id", u.id), ("Reputation", u.reputation), ("CreationDate", u.creation_date), ("Views", u.profile_views),
        ("UpVotes", u.up_votes), ("DownVotes", u.down_votes),
    ))


def tag_row(t: TagRecord) -> str:
    return _row((("TagName", t.name), ("Count", t.question_count)))


def write_dump(snapshot: DumpSnapshot, directory: str | os.PathLike) -> dict[str, Path]:
    """Write a snapshot as dump-format Posts.xml, Users.xml and Tags.xml.

    Timestamps carry millisecond precision, as in real dumps.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {k: d / v for k, v in DUMP_FILES.items()}
    posts = sorted([*snapshot.questions, *snapshot.answers], key=lambda r: r.id)
    _write_rows(paths["posts"], "posts",
                (question_row(p) if isinstance(p, QuestionRecord) else answer_row(p) for p in posts))
    _write_rows(paths["users"], "users", (user_row(u) for u in snapshot.users))
    _write_rows(paths["tags"], "tags", (tag_row(t) for t in snapshot.tags))
    return paths
