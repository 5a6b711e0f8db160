import base64

from hypothesis import given, settings
from hypothesis import strategies as st

from threadbench.ingest import (
    EmailThread,
    RawMessage,
    alias_for,
    anonymize_thread,
    build_threads,
    normalize_subject,
    parse_mbox,
    read_threads,
    split_mbox,
    write_threads,
)


def mbox_message(mid, subject, body, irt=None, date="Mon, 03 Feb 2020 09:00:00 +0000", sender="A <a@x.org>", extra=""):
    lines = [f"From a@x.org {date}", f"From: {sender}", f"Date: {date}", f"Subject: {subject}"]
    if mid:
        lines.append(f"Message-ID: <{mid}>")
    if irt:
        lines.append(f"In-Reply-To: <{irt}>")
    return ("\n".join(lines) + extra + "\n\n" + body + "\n\n").encode()


def test_empty_archive_gives_no_threads():
    threads, report = parse_mbox(b"")
    assert threads == []
    assert report.messages == 0 and report.threads == 0


def test_reply_linked_by_header_joins_its_parent():
    data = (
        mbox_message("1@x", "help", "first")
        + mbox_message("2@x", "Re: help", "second", irt="1@x", date="Mon, 03 Feb 2020 10:00:00 +0000")
        + mbox_message("3@x", "other topic", "third", date="Tue, 04 Feb 2020 10:00:00 +0000")
    )
    threads, report = parse_mbox(data)
    assert [len(t.messages) for t in threads] == [2, 1]
    assert report.threads == 2


def test_escaped_from_line_is_restored_in_body():
    data = mbox_message("1@x", "s", "Hello\n>From here on it works\nbye")
    threads, report = parse_mbox(data)
    assert report.messages == 1
    assert "\nFrom here on it works\n" in threads[0].messages[0].body


def test_unescaped_from_line_inside_paragraph_does_not_split():
    data = mbox_message("1@x", "s", "line one\nFrom the data it follows\nline three")
    assert len(split_mbox(data)) == 1


def test_malformed_message_is_dropped_and_counted():
    bad = b"From x Mon Feb  3 09:00:00 2020\nFrom: x <x@y.z>\nSubject: no date\n\nbody\n\n"
    threads, report = parse_mbox(mbox_message("1@x", "ok", "fine") + bad)
    assert report.messages == 2 and report.dropped == 1
    assert report.drop_reasons == {"malformed_header": 1}
    assert len(threads) == 1


def test_quoted_printable_and_base64_bodies_are_decoded():
    qp = mbox_message("1@x", "s", "caf=C3=A9 off=\ntarget", extra="\nContent-Type: text/plain; charset=utf-8\nContent-Transfer-Encoding: quoted-printable")
    b64 = mbox_message(
        "2@x", "t", base64.b64encode("µg dose".encode()).decode(),
        extra="\nContent-Type: text/plain; charset=utf-8\nContent-Transfer-Encoding: base64",
    )
    threads, _ = parse_mbox(qp + b64)
    bodies = sorted(m.body for t in threads for m in t.messages)
    assert bodies == ["café offtarget", "µg dose"]


def test_undecodable_bytes_are_replaced_and_counted():
    raw = mbox_message("1@x", "s", "ok", extra="\nContent-Type: text/plain; charset=utf-8").replace(b"ok", b"o\xffk")
    threads, report = parse_mbox(raw)
    assert threads[0].messages[0].body == "o\ufffdk"
    assert report.replaced_bytes == 1


def test_subject_fallback_links_reply_without_headers():
    data = mbox_message("1@x", "Cloning trouble", "q") + mbox_message(
        "2@x", "RE: Cloning trouble", "a", date="Mon, 03 Feb 2020 11:00:00 +0000"
    )
    threads, _ = parse_mbox(data)
    assert len(threads) == 1 and len(threads[0].messages) == 2


def test_normalize_subject_strips_reply_prefixes_and_list_tags():
    assert normalize_subject("Re: [crispr] Fwd: RE: Help  ") == "help"
    assert normalize_subject("AW: Sv: Topic") == "topic"


def test_fixture_archive(forum_mbox):
    threads, report = parse_mbox(forum_mbox)
    assert report.messages == 22 and report.dropped == 1
    assert len(threads) == 8
    assert sum(len(t.messages) for t in threads) + report.dropped == report.messages


def test_parse_is_deterministic(forum_mbox):
    assert parse_mbox(forum_mbox) == parse_mbox(forum_mbox)


def test_thread_jsonl_roundtrip(tmp_path, forum_mbox):
    threads, _ = parse_mbox(forum_mbox)
    write_threads(threads, tmp_path / "t.jsonl")
    back = read_threads(tmp_path / "t.jsonl")
    assert [t.to_json() for t in back] == [t.to_json() for t in threads]


def _thread(*msgs):
    return EmailThread("t", "s", tuple(msgs))


def test_anonymize_replaces_senders_and_mentions():
    t = _thread(
        RawMessage("<1>", "s", "Xavier Lund <xl@a.org>", 1, "Question from me, write to xl@a.org"),
        RawMessage("<2>", "s", "Yara Diaz <yd@b.org>", 2, "Hi Xavier, try again. XL@A.ORG knows."),
    )
    anon, mapping = anonymize_thread(t)
    assert [m.sender for m in anon.messages] == ["PersonA", "PersonB"]
    assert anon.messages[0].body == "Question from me, write to PersonA"
    assert anon.messages[1].body == "Hi PersonA, try again. PersonA knows."
    assert len(mapping) == 2


def test_anonymize_is_identity_on_aliased_thread():
    t = _thread(
        RawMessage("<1>", "s", "PersonA", 1, "PersonB said hello"),
        RawMessage("<2>", "s", "PersonB", 2, "Thanks PersonA"),
    )
    anon, _ = anonymize_thread(t)
    assert anon == t


def test_single_sender_alias_map_has_one_entry():
    t = _thread(RawMessage("<1>", "s", "Solo <s@x.org>", 1, "a"), RawMessage("<2>", "s", "Solo <s@x.org>", 2, "b"))
    assert len(anonymize_thread(t)[1]) == 1


def test_anonymize_fixture_is_idempotent(forum_mbox):
    for t in parse_mbox(forum_mbox)[0]:
        once = anonymize_thread(t)[0]
        assert anonymize_thread(once)[0] == once
        assert all("@" not in m.body for m in once.messages)


def test_alias_sequence():
    assert [alias_for(i) for i in (0, 1, 25, 26, 27, 51, 52)] == [
        "PersonA", "PersonB", "PersonZ", "PersonAA", "PersonAB", "PersonAZ", "PersonBA",
    ]


_names = st.sampled_from(["Ann Lee", "Bo Chan", "Cy Diaz", "Di Eko"])


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.tuples(_names, st.text(alphabet="abc xyz.@", max_size=30)), min_size=1, max_size=6),
)
def test_anonymize_idempotent_property(rows):
    msgs = tuple(
        RawMessage(f"<{i}>", "s", f"{name} <{name.split()[0].lower()}@lab.org>", i, f"{body} {rows[0][0]}")
        for i, (name, body) in enumerate(rows)
    )
    once = anonymize_thread(EmailThread("t", "s", msgs))[0]
    assert anonymize_thread(once)[0] == once


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(-1, 5)), min_size=1, max_size=12))
def test_threads_partition_messages(links):
    msgs = [
        RawMessage(f"<m{i}>", f"subject {s}", "a <a@x>", i, "b", in_reply_to=f"<m{p}>" if p >= 0 else None)
        for i, (s, p) in enumerate(links)
    ]
    threads = build_threads(msgs)
    ids = [m.message_id for t in threads for m in t.messages]
    assert sorted(ids) == sorted(m.message_id for m in msgs)
    assert len(set(t.thread_id for t in threads)) == len(threads)
