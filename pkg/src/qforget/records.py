"""Typed records extracted from Stack Exchange dump files, plus timestamp helpers."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone

UTC = timezone.utc
EPOCH = datetime(1970, 1, 1, tzinfo=UTC)

_TS_RE = re.compile(
    r"^(\d{4})-(\d{2})-(\d{2})(?:[T ](\d{2}):(\d{2}):(\d{2})(?:\.(\d{1,6}))?"
    r"(Z|[+-]\d{2}:?\d{2})?)?$"
)


def parse_timestamp(text: str) -> datetime:
    """Parse an ISO-8601 dump timestamp; a missing zone means UTC, a bare date midnight."""
    m = _TS_RE.match(text.strip())
    if m is None:
        raise ValueError(f"unparseable timestamp {text!r}")
    year, month, day, hour, minute, second, frac, zone = m.groups()
    micro = int(frac.ljust(6, "0")) if frac else 0
    dt = datetime(int(year), int(month), int(day), int(hour or 0), int(minute or 0), int(second or 0), micro,
                  tzinfo=UTC)
    if zone and zone != "Z":
        sign = 1 if zone[0] == "+" else -1
        digits = zone[1:].replace(":", "")
        offset = timedelta(hours=int(digits[:2]), minutes=int(digits[2:]))
        dt = dt - sign * offset
    return dt


def format_timestamp(dt: datetime) -> str:
    """Format in the dump convention (millisecond precision, no zone)."""
    dt = dt.astimezone(UTC)
    return dt.strftime("%Y-%m-%dT%H:%M:%S.") + f"{dt.microsecond // 1000:03d}"


def to_micros(dt: datetime) -> int:
    delta = dt.astimezone(UTC) - EPOCH
    return (delta.days * 86_400 + delta.seconds) * 1_000_000 + delta.microseconds


def from_micros(us: int) -> datetime:
    return EPOCH + timedelta(microseconds=int(us))


def dump_label(dt: datetime) -> str:
    """Compact, filesystem-safe label for a dump time, e.g. ``20190301T000000Z``."""
    return dt.astimezone(UTC).strftime("%Y%m%dT%H%M%SZ")


@dataclass(frozen=True, slots=True)
class QuestionRecord:
    id: int
    creation_date: datetime
    score: int
    view_count: int
    body_html: str
    title: str
    tags: tuple[str, ...]
    answer_count: int
    comment_count: int
    favorite_count: int
    last_activity_date: datetime
    accepted_answer_id: int | None = None
    owner_user_id: int | None = None
    closed_date: datetime | None = None

    def check(self) -> None:
        if self.id <= 0:
            raise ValueError("question id must be positive")
        if not 1 <= len(self.tags) <= 5:
            raise ValueError(f"question {self.id} has {len(self.tags)} tags")
        if self.last_activity_date < self.creation_date:
            raise ValueError(f"question {self.id} last activity precedes creation")
        if min(self.view_count, self.answer_count, self.comment_count, self.favorite_count) < 0:
            raise ValueError(f"question {self.id} has a negative counter")


@dataclass(frozen=True, slots=True)
class AnswerRecord:
    id: int
    parent_question_id: int
    creation_date: datetime
    score: int
    comment_count: int
    body_html: str
    last_activity_date: datetime
    owner_user_id: int | None = None

    def check(self) -> None:
        if self.id <= 0 or self.parent_question_id <= 0:
            raise ValueError("answer ids must be positive")
        if self.last_activity_date < self.creation_date:
            raise ValueError(f"answer {self.id} last activity precedes creation")
        if self.comment_count < 0:
            raise ValueError(f"answer {self.id} has a negative comment count")


@dataclass(frozen=True, slots=True)
class UserRecord:
    id: int
    reputation: int
    profile_views: int
    up_votes: int
    down_votes: int
    creation_date: datetime

    def check(self) -> None:
        if self.id <= 0:
            raise ValueError("user id must be positive")
        if min(self.reputation, self.profile_views, self.up_votes, self.down_votes) < 0:
            raise ValueError(f"user {self.id} has a negative counter")


@dataclass(frozen=True, slots=True)
class TagRecord:
    name: str
    question_count: int

    def check(self) -> None:
        if not self.name or "<" in self.name or ">" in self.name:
            raise ValueError(f"bad tag name {self.name!r}")
        if self.question_count < 0:
            raise ValueError(f"tag {self.name} has a negative count")


@dataclass
class DumpSnapshot:
    """Everything extracted from one dump, stamped with its publication time."""

    dump_time: datetime
    questions: list[QuestionRecord] = field(default_factory=list)
    answers: list[AnswerRecord] = field(default_factory=list)
    users: list[UserRecord] = field(default_factory=list)
    tags: list[TagRecord] = field(default_factory=list)

    def check(self) -> None:
        for rec in (*self.questions, *self.answers, *self.users):
            if rec.creation_date > self.dump_time:
                raise ValueError(f"{type(rec).__name__} {rec.id} created after the dump time")
