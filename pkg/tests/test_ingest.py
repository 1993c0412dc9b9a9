from __future__ import annotations

import io
from datetime import datetime, timedelta, timezone

import pytest
from hypothesis import given, strategies as st

from conftest import FIXTURES
from helpers import answer, question, snapshot, user
from qforget.ingest import (
    DumpFormatError, ParseReport, encode_attribute, iter_rows, parse_posts, parse_tags, parse_users, question_row,
    read_dump, split_tags, write_dump,
)
from qforget.records import (
    AnswerRecord, QuestionRecord, TagRecord, UserRecord, format_timestamp, parse_timestamp,
)

UTC = timezone.utc
DUMP = datetime(2020, 1, 1, tzinfo=UTC)


def ts(*parts):
    return datetime(*parts, tzinfo=UTC)


def posts_xml(*rows: str) -> io.BytesIO:
    body = "\n".join(f"  <row {r} />" for r in rows)
    return io.BytesIO(f'<?xml version="1.0" encoding="utf-8"?>\n<posts>\n{body}\n</posts>\n'.encode())


def parse(stream, strict=False):
    report = ParseReport()
    return list(parse_posts(stream, DUMP, report=report, strict=strict)), report


# --- the hand-built fixture files -------------------------------------------------


def test_posts_fixture_matches_hand_written_records():
    with open(FIXTURES / "Posts.xml", "rb") as fh:
        records, report = parse(fh)
    expected = [
        QuestionRecord(
            id=4, creation_date=ts(2008, 7, 31, 21, 42, 52, 667000), score=710, view_count=710,
            body_html="<p>How do I convert a <code>double</code> to an int?</p>\n",
            title="Convert Decimal to Double? & more", tags=("java", "android"), answer_count=2,
            comment_count=3, favorite_count=48, last_activity_date=ts(2019, 7, 19, 1, 39, 54, 173000),
            accepted_answer_id=7, owner_user_id=8, closed_date=None,
        ),
        QuestionRecord(
            id=6, creation_date=ts(2008, 7, 31, 22, 8, 8, 620000), score=-2, view_count=0, body_html="",
            title="Empty one", tags=("c#",), answer_count=0, comment_count=0, favorite_count=0,
            last_activity_date=ts(2008, 7, 31, 22, 8, 8, 620000), accepted_answer_id=None, owner_user_id=None,
            closed_date=ts(2009, 1, 2),
        ),
        AnswerRecord(
            id=7, parent_question_id=4, creation_date=ts(2008, 7, 31, 22, 17, 57, 883000), score=499,
            comment_count=1, body_html="<p>An explicit cast works.</p>",
            last_activity_date=ts(2010, 10, 25), owner_user_id=9,
        ),
        QuestionRecord(
            id=9, creation_date=ts(2008, 8, 1, 12), score=0, view_count=12, body_html="<p>café &amp; tea</p>",
            title="Tabs\tand\nnewlines", tags=("python", "web-scraping"), answer_count=1, comment_count=0,
            favorite_count=0, last_activity_date=ts(2008, 8, 1, 12, 30), accepted_answer_id=None,
            owner_user_id=8, closed_date=None,
        ),
        AnswerRecord(
            id=12, parent_question_id=9, creation_date=ts(2008, 8, 1, 12, 10, 0, 500000), score=3,
            comment_count=0, body_html="", last_activity_date=ts(2008, 8, 1, 12, 10, 0, 500000),
            owner_user_id=None,
        ),
    ]
    assert records == expected
    assert report.records == 5
    assert report.n_skipped_types == 1 and report.skipped_types == {5: 1}
    assert report.n_warnings == 0


def test_users_fixture_matches_hand_written_records():
    report = ParseReport()
    with open(FIXTURES / "Users.xml", "rb") as fh:
        users = list(parse_users(fh, report=report))
    assert users == [
        UserRecord(2, 1, 649, 506542, 1321, ts(2008, 7, 31)),
        UserRecord(1, 0, 0, 0, 0, ts(2008, 7, 31, 14, 22, 31, 287000)),
        UserRecord(8, 42816, 12, 3340, 88, ts(2008, 7, 31, 21, 33, 24, 57000)),
        UserRecord(9, 5, 3, 1, 2, ts(2008, 8, 1, 0, 59, 11, 147000)),
    ]
    assert report.n_warnings == 0


def test_tags_fixture_and_lowercase_normalization():
    with open(FIXTURES / "Tags.xml", "rb") as fh:
        tags = list(parse_tags(fh))
    assert tags == [TagRecord("java", 12), TagRecord("android", 3), TagRecord("c#", 1)]


def test_question_from_the_710_views_example():
    (q,), _ = parse(posts_xml(
        'Id="1" PostTypeId="1" CreationDate="2017-01-01T00:00:00" ViewCount="710" '
        'Tags="&lt;java&gt;&lt;android&gt;"'
    ))
    assert q.view_count == 710 and q.tags == ("java", "android")


def test_read_dump_collects_all_three_files():
    snap, reports = read_dump(FIXTURES / "Posts.xml", FIXTURES / "Users.xml", FIXTURES / "Tags.xml", DUMP)
    assert [q.id for q in snap.questions] == [4, 6, 9]
    assert [a.id for a in snap.answers] == [7, 12]
    assert len(snap.users) == 4 and len(snap.tags) == 3
    assert reports["posts"].skipped_types == {5: 1}


# --- empty and trivial inputs -------------------------------------------------


@pytest.mark.parametrize("text", [b"", b'<?xml version="1.0"?>\n<posts>\n</posts>\n', b"<posts/>"])
def test_empty_inputs_yield_nothing_and_no_warnings(text):
    records, report = parse(io.BytesIO(text))
    assert records == [] and report.n_warnings == 0
    assert list(parse_tags(io.BytesIO(text))) == []
    assert list(parse_users(io.BytesIO(text))) == []


def test_zero_counter_user():
    stream = io.BytesIO(b'<users><row Id="3" Reputation="0" Views="0" UpVotes="0" DownVotes="0" '
                        b'CreationDate="2010-01-01T00:00:00" /></users>')
    (u,) = parse_users(stream)
    assert (u.reputation, u.profile_views, u.up_votes, u.down_votes) == (0, 0, 0, 0)


# --- error handling ---------------------------------------------------------------


def test_user_missing_id_is_skipped_with_one_warning():
    report = ParseReport()
    stream = io.BytesIO(b'<users>\n<row Reputation="5" CreationDate="2010-01-01T00:00:00" />\n'
                        b'<row Id="4" Reputation="5" CreationDate="2010-01-01T00:00:00" />\n</users>')
    users = list(parse_users(stream, report=report))
    assert [u.id for u in users] == [4]
    assert report.n_warnings == 1


def test_nonpositive_user_id_is_rejected():
    report = ParseReport()
    stream = io.BytesIO(b'<users><row Id="-1" Reputation="1" CreationDate="2010-01-01T00:00:00" /></users>')
    assert list(parse_users(stream, report=report)) == []
    assert report.n_warnings == 1


def test_malformed_row_warning_carries_byte_offset():
    row = 'Id="{}" PostTypeId="1" CreationDate="2017-01-01T00:00:00" Tags="&lt;a&gt;"'
    stream = posts_xml(row.format(1), row.format(2) + ' Score="x"', row.format(3))
    raw = stream.getvalue()
    records, report = parse(stream)
    assert [r.id for r in records] == [1, 3]
    (w,) = report.warnings
    assert w.offset == raw.index(b'<row Id="2"')
    stream.seek(0)
    with pytest.raises(DumpFormatError) as err:
        parse(stream, strict=True)
    assert err.value.offset == w.offset


def test_unparseable_xml_row_is_skipped_then_parsing_resumes():
    stream = io.BytesIO(
        b'<posts>\n<row Id="1" PostTypeId="1" CreationDate="2017-01-01T00:00:00" Tags="&lt;a&gt;" oops />\n'
        b'<row Id="2" PostTypeId="1" CreationDate="2017-01-01T00:00:00" Tags="&lt;a&gt;" />\n</posts>'
    )
    records, report = parse(stream)
    assert [r.id for r in records] == [2]
    assert report.n_warnings == 1


@pytest.mark.parametrize("attrs", [
    'PostTypeId="1" CreationDate="2017-01-01T00:00:00" Tags="&lt;a&gt;"',      # no Id
    'Id="1" CreationDate="2017-01-01T00:00:00" Tags="&lt;a&gt;"',               # no PostTypeId
    'Id="1" PostTypeId="1" Tags="&lt;a&gt;"',                                    # no CreationDate
])
def test_missing_mandatory_attribute_is_skipped_even_in_strict_mode(attrs):
    for strict in (False, True):
        records, report = parse(posts_xml(attrs), strict=strict)
        assert records == [] and report.n_warnings == 1


def test_unparseable_timestamp_is_skipped():
    records, report = parse(posts_xml('Id="1" PostTypeId="1" CreationDate="yesterday" Tags="&lt;a&gt;"'))
    assert records == [] and report.n_warnings == 1


@pytest.mark.parametrize("tags", ["", "&lt;a&gt;&lt;b&gt;&lt;c&gt;&lt;d&gt;&lt;e&gt;&lt;f&gt;"])
def test_tag_count_outside_one_to_five_is_rejected(tags):
    records, report = parse(posts_xml(f'Id="1" PostTypeId="1" CreationDate="2017-01-01T00:00:00" Tags="{tags}"'))
    assert records == [] and report.n_warnings == 1


def test_rows_created_after_the_dump_are_rejected():
    records, report = parse(posts_xml('Id="1" PostTypeId="1" CreationDate="2021-01-01T00:00:00" Tags="&lt;a&gt;"'))
    assert records == [] and report.n_warnings == 1


def test_answer_without_parent_is_rejected():
    records, report = parse(posts_xml('Id="1" PostTypeId="2" CreationDate="2017-01-01T00:00:00"'))
    assert records == [] and report.n_warnings == 1


def test_truncated_file_keeps_complete_rows():
    stream = io.BytesIO(
        b'<posts>\n<row Id="1" PostTypeId="1" CreationDate="2017-01-01T00:00:00" Tags="&lt;a&gt;" />\n'
        b'<row Id="2" PostTypeId="1" CreationDate="2017-01-01T00:'
    )
    records, report = parse(stream)
    assert [r.id for r in records] == [1]
    assert report.n_warnings == 1


def test_unknown_entity_is_a_malformed_row():
    records, report = parse(posts_xml('Id="1" PostTypeId="1" CreationDate="2017-01-01T00:00:00" '
                                      'Tags="&lt;a&gt;" Body="&nbsp;"'))
    assert records == [] and report.n_warnings == 1


# --- format details ----------------------------------------------------------------


def test_raw_angle_bracket_inside_quoted_value():
    (q,), _ = parse(posts_xml('Id="1" PostTypeId="1" CreationDate="2017-01-01T00:00:00" '
                              'Tags="&lt;a&gt;" Body="x > y" Title=\'single "quoted"\''))
    assert q.body_html == "x > y" and q.title == 'single "quoted"'


def test_comments_and_declarations_are_ignored():
    stream = io.BytesIO(b'<?xml version="1.0"?>\n<!-- <row Id="9" PostTypeId="1" /> -->\n<posts>\n'
                        b'<row Id="1" PostTypeId="1" CreationDate="2017-01-01T00:00:00" Tags="&lt;a&gt;"/>\n</posts>')
    records, report = parse(stream)
    assert [r.id for r in records] == [1] and report.rows == 1


@pytest.mark.parametrize("raw,expected", [
    ("<java><android>", ("java", "android")),
    ("|java|android|", ("java", "android")),
    ("java|Android", ("java", "android")),
    ("<C++><c#>", ("c++", "c#")),
    ("", ()),
])
def test_both_tag_encodings(raw, expected):
    assert split_tags(raw) == expected


@pytest.mark.parametrize("text,expected", [
    ("2008-07-31T21:42:52.667", datetime(2008, 7, 31, 21, 42, 52, 667000, tzinfo=UTC)),
    ("2008-07-31T21:42:52", datetime(2008, 7, 31, 21, 42, 52, tzinfo=UTC)),
    ("2008-07-31T21:42:52Z", datetime(2008, 7, 31, 21, 42, 52, tzinfo=UTC)),
    ("2008-07-31T23:42:52+02:00", datetime(2008, 7, 31, 21, 42, 52, tzinfo=UTC)),
    ("2008-07-31", datetime(2008, 7, 31, tzinfo=UTC)),
])
def test_timestamps_are_utc(text, expected):
    assert parse_timestamp(text) == expected


def test_large_row_spanning_many_chunks():
    body = "word " * 60_000
    (q,), report = parse(posts_xml(f'Id="1" PostTypeId="1" CreationDate="2017-01-01T00:00:00" '
                                   f'Tags="&lt;a&gt;" Body="{body}"'))
    assert q.body_html == body and report.n_warnings == 0


def _many_rows(n: int) -> bytes:
    rows = [
        f'Id="{i}" PostTypeId="{1 if i % 3 else 2}" ParentId="1" CreationDate="2017-01-01T00:00:00" '
        f'Tags="&lt;t{i % 7}&gt;" Body="&lt;p&gt;row {i} &amp;amp; more&lt;/p&gt;" ViewCount="{i}"'
        for i in range(1, n + 1)
    ]
    return posts_xml(*rows).getvalue()


@given(st.integers(min_value=1, max_value=300))
def test_chunk_size_does_not_change_the_output(chunk_size):
    data = _many_rows(25)
    reference = list(iter_rows(io.BytesIO(data)))
    assert list(iter_rows(io.BytesIO(data), chunk_size=chunk_size)) == reference


def test_output_order_equals_file_order():
    records, _ = parse(io.BytesIO(_many_rows(200)))
    assert [r.id for r in records] == list(range(1, 201))


_xml_text = st.text(
    alphabet=st.characters(blacklist_categories=("Cs", "Cc"), blacklist_characters="￾￿") | st.sampled_from("\t\n\r"),
    max_size=60,
)


@given(body=_xml_text, title=_xml_text)
def test_entity_encoding_round_trip(body, title):
    q = question(5, created=datetime(2017, 1, 1, tzinfo=UTC), views=3, body_html=body, title=title)
    stream = io.BytesIO(("<posts>\n" + question_row(q) + "</posts>\n").encode("utf-8"))
    (back,), report = parse(stream)
    assert report.n_warnings == 0
    assert back == q


def test_reencoding_parsed_fixture_gives_identical_records():
    with open(FIXTURES / "Posts.xml", "rb") as fh:
        records, _ = parse(fh)
    questions = [r for r in records if isinstance(r, QuestionRecord)]
    stream = io.BytesIO(("<posts>\n" + "".join(question_row(q) for q in questions) + "</posts>\n").encode())
    again, _ = parse(stream)
    assert again == questions


def test_write_dump_then_read_dump_round_trips(tmp_path):
    t = datetime(2019, 1, 1, 12, tzinfo=UTC)
    created = t - timedelta(days=30)
    snap = snapshot(
        t,
        [question(1, created=created, views=10, tags=("a", "b"), owner_user_id=2, accepted_answer_id=3,
                  closed_date=created + timedelta(days=1), body_html='<p>"x" & <b>y</b></p>\n', title="T\tz"),
         question(2, created=created, views=0)],
        [answer(3, 1, created + timedelta(minutes=5), score=-1, owner_user_id=2, body_html="<p>ok</p>")],
        [user(2, reputation=7, up_votes=1)],
    )
    paths = write_dump(snap, tmp_path)
    back, reports = read_dump(paths["posts"], paths["users"], paths["tags"], t, strict=True)
    assert back.questions == snap.questions
    assert back.answers == snap.answers
    assert back.users == snap.users
    assert back.tags == snap.tags
    assert all(r.n_warnings == 0 for r in reports.values())


def test_format_timestamp_truncates_to_milliseconds():
    dt = datetime(2019, 1, 1, 1, 2, 3, 456789, tzinfo=UTC)
    assert format_timestamp(dt) == "2019-01-01T01:02:03.456"
    assert parse_timestamp(format_timestamp(dt)) == dt.replace(microsecond=456000)


def test_encode_attribute_escapes_markup():
    assert encode_attribute('<a href="x">&\n') == "&lt;a href=&quot;x&quot;&gt;&amp;&#xA;"
