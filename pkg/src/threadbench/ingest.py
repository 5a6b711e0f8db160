"""Parse mbox archives into ordered, optionally anonymized email threads.

Threading precedence: In-Reply-To/References chains first; a message whose
linkage headers resolve to nothing in the archive falls back to its
normalized subject.
"""

from __future__ import annotations

import datetime as _dt
import email
import email.errors
import email.header
import email.policy
import hashlib
import json
import re
from dataclasses import dataclass, field, replace
from email.message import Message
from email.utils import parseaddr, parsedate_to_datetime
from pathlib import Path
from typing import Iterable

_FROM_LINE = re.compile(rb"^From ")
_ESCAPED_FROM = re.compile(rb"^>(>*From )")
_MSGID = re.compile(r"<[^<>\s]+>")
_SUBJECT_PREFIX = re.compile(r"^\s*(?:(?:re|fwd?|aw|sv)\s*(?:\[\d+\])?\s*:|\[[^\]]*\])\s*", re.I)
_EMAIL = re.compile(r"[\w.+-]+@[\w-]+(?:\.[\w-]+)+")
ALIAS_PATTERN = re.compile(r"\bPerson\s?[A-Z]{1,2}\b")


class MalformedHeader(ValueError):
    pass


@dataclass(frozen=True)
class RawMessage:
    message_id: str
    subject: str
    sender: str
    date: int
    body: str
    in_reply_to: str | None = None
    references: tuple[str, ...] = ()


@dataclass(frozen=True)
class EmailThread:
    thread_id: str
    subject_normalized: str
    messages: tuple[RawMessage, ...]

    def to_json(self) -> dict:
        return {
            "thread_id": self.thread_id,
            "subject": self.subject_normalized,
            "messages": [
                {"id": m.message_id, "sender": m.sender, "date": m.date, "body": m.body}
                for m in self.messages
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EmailThread":
        msgs = tuple(
            RawMessage(
                message_id=m["id"],
                subject=obj["subject"],
                sender=m["sender"],
                date=int(m["date"]),
                body=m["body"],
            )
            for m in obj["messages"]
        )
        return cls(obj["thread_id"], obj["subject"], msgs)


@dataclass
class ParseReport:
    messages: int = 0
    dropped: int = 0
    threads: int = 0
    replaced_bytes: int = 0
    drop_reasons: dict[str, int] = field(default_factory=dict)

    def drop(self, reason: str) -> None:
        self.dropped += 1
        self.drop_reasons[reason] = self.drop_reasons.get(reason, 0) + 1

    def as_dict(self) -> dict:
        return {
            "messages": self.messages,
            "dropped": self.dropped,
            "threads": self.threads,
            "replaced_bytes": self.replaced_bytes,
            "drop_reasons": dict(sorted(self.drop_reasons.items())),
        }


def split_mbox(data: bytes) -> list[bytes]:
    """Split an mbox byte stream into raw messages, undoing ``>From`` quoting.

    A ``From `` line only starts a new message at the top of the stream or
    after a blank line.
    """
    messages: list[list[bytes]] = []
    current: list[bytes] | None = None
    prev_blank = True
    for line in data.splitlines(keepends=True):
        if prev_blank and _FROM_LINE.match(line):
            current = []
            messages.append(current)
            prev_blank = False
            continue
        stripped = line.rstrip(b"\r\n")
        prev_blank = stripped == b""
        if current is None:
            continue
        current.append(_ESCAPED_FROM.sub(rb"\1", line))
    out = []
    for lines in messages:
        # the separator's preceding blank line belongs to the mbox framing
        if lines and lines[-1].strip() == b"":
            lines = lines[:-1]
        out.append(b"".join(lines))
    return out


def normalize_subject(subject: str) -> str:
    s = subject or ""
    while True:
        new = _SUBJECT_PREFIX.sub("", s, count=1)
        if new == s:
            break
        s = new
    return " ".join(s.split()).lower()


def _decode_bytes(payload: bytes, charset: str | None) -> tuple[str, int]:
    try:
        text = payload.decode(charset or "utf-8", errors="surrogateescape")
    except LookupError:
        text = payload.decode("utf-8", errors="surrogateescape")
    bad = sum(1 for ch in text if "\udc80" <= ch <= "\udcff")
    if bad:
        text = "".join("\ufffd" if "\udc80" <= ch <= "\udcff" else ch for ch in text)
    return text, bad


def _body_of(msg: Message) -> tuple[str, int]:
    parts = [p for p in msg.walk() if not p.is_multipart()]
    text_parts = [
        p for p in parts
        if p.get_content_type() == "text/plain" and not p.get_filename()
    ] or [p for p in parts if p.get_content_maintype() == "text" and not p.get_filename()]
    chunks, bad_total = [], 0
    for part in text_parts:
        payload = part.get_payload(decode=True)
        if payload is None:
            continue
        text, bad = _decode_bytes(payload, part.get_content_charset())
        chunks.append(text)
        bad_total += bad
    body = "\n".join(chunks).replace("\r\n", "\n")
    return body.strip("\n"), bad_total


def _header(msg: Message, name: str) -> str:
    value = msg.get(name)
    if value is None:
        return ""
    text = str(email.header.make_header(email.header.decode_header(str(value))))
    return " ".join(text.split())


def parse_message(raw: bytes) -> tuple[RawMessage, int]:
    """Parse one raw message; raises MalformedHeader when it cannot be used."""
    head = raw.lstrip(b"\r\n").split(b"\n", 1)[0]
    if not re.match(rb"^[!-9;-~]+:", head):
        raise MalformedHeader("message does not start with a header field")
    msg = email.message_from_bytes(raw, policy=email.policy.compat32)
    try:
        sender = _header(msg, "From")
        subject = _header(msg, "Subject")
        date_str = _header(msg, "Date")
    except (ValueError, LookupError, email.errors.HeaderParseError) as exc:
        raise MalformedHeader(str(exc)) from exc
    if not sender:
        raise MalformedHeader("missing From")
    if not date_str:
        raise MalformedHeader("missing Date")
    try:
        dt = parsedate_to_datetime(date_str)
    except (TypeError, ValueError, IndexError) as exc:
        raise MalformedHeader(f"bad Date {date_str!r}") from exc
    if dt.tzinfo is None:
        # naive dates are taken as UTC
        dt = dt.replace(tzinfo=_dt.timezone.utc)
    mid_match = _MSGID.search(_header(msg, "Message-ID"))
    irt_match = _MSGID.search(_header(msg, "In-Reply-To"))
    refs = tuple(_MSGID.findall(_header(msg, "References")))
    body, bad = _body_of(msg)
    if mid_match:
        message_id = mid_match.group(0)
    else:
        message_id = "<synthetic-" + hashlib.sha1(raw).hexdigest()[:20] + ">"
    return (
        RawMessage(
            message_id=message_id,
            subject=subject,
            sender=sender,
            date=int(dt.timestamp()),
            body=body,
            in_reply_to=irt_match.group(0) if irt_match else None,
            references=refs,
        ),
        bad,
    )


class _DisjointSet:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def _stable_id(*parts: str) -> str:
    return hashlib.sha256("\x1f".join(parts).encode("utf-8")).hexdigest()[:16]


def build_threads(messages: list[RawMessage]) -> list[EmailThread]:
    order = sorted(range(len(messages)), key=lambda i: (messages[i].date, messages[i].message_id))
    msgs = [messages[i] for i in order]
    index = {m.message_id: i for i, m in enumerate(msgs)}
    ds = _DisjointSet(len(msgs))
    linked = [False] * len(msgs)
    for i, m in enumerate(msgs):
        for ref in (m.in_reply_to, *m.references):
            j = index.get(ref) if ref else None
            if j is not None and j != i:
                ds.union(i, j)
                linked[i] = True
    first_by_subject: dict[str, int] = {}
    for i, m in enumerate(msgs):
        key = normalize_subject(m.subject)
        if key:
            first_by_subject.setdefault(key, i)
    for i, m in enumerate(msgs):
        key = normalize_subject(m.subject)
        if not linked[i] and key and first_by_subject[key] != i:
            ds.union(i, first_by_subject[key])

    groups: dict[int, list[int]] = {}
    for i in range(len(msgs)):
        groups.setdefault(ds.find(i), []).append(i)
    threads = []
    for members in groups.values():
        members.sort()
        root = msgs[members[0]]
        subject = normalize_subject(root.subject)
        if root.message_id.startswith("<synthetic-"):
            tid = _stable_id(subject, str(root.date))
        else:
            tid = _stable_id(root.message_id)
        threads.append(EmailThread(tid, subject, tuple(msgs[i] for i in members)))
    threads.sort(key=lambda t: (t.messages[0].date, t.thread_id))
    return threads


def parse_mbox(archive_bytes: bytes) -> tuple[list[EmailThread], ParseReport]:
    report = ParseReport()
    parsed: list[RawMessage] = []
    seen: set[str] = set()
    for raw in split_mbox(archive_bytes):
        report.messages += 1
        try:
            msg, bad = parse_message(raw)
        except MalformedHeader:
            report.drop("malformed_header")
            continue
        if msg.message_id in seen:
            report.drop("duplicate_message_id")
            continue
        seen.add(msg.message_id)
        report.replaced_bytes += bad
        parsed.append(msg)
    threads = build_threads(parsed)
    report.threads = len(threads)
    return threads, report


def alias_for(n: int) -> str:
    """0 -> PersonA, 25 -> PersonZ, 26 -> PersonAA."""
    letters = ""
    n += 1
    while n:
        n, rem = divmod(n - 1, 26)
        letters = chr(ord("A") + rem) + letters
    return "Person" + letters


def _identity(sender: str) -> tuple[str, str, str]:
    name, addr = parseaddr(sender)
    name = name.strip().strip('"')
    addr = addr.strip().lower()
    if "@" not in addr:
        # parseaddr puts a bare display name into the address slot
        name, addr = (name or addr or sender.strip()), ""
    return (addr or name.lower()), name, addr


def anonymize_thread(thread: EmailThread) -> tuple[EmailThread, dict[str, str]]:
    alias_by_identity: dict[str, str] = {}
    name_aliases: dict[str, str] = {}
    addr_aliases: dict[str, str] = {}

    def assign(key: str) -> str:
        if key not in alias_by_identity:
            alias_by_identity[key] = alias_for(len(alias_by_identity))
        return alias_by_identity[key]

    sender_alias = []
    for m in thread.messages:
        key, name, addr = _identity(m.sender)
        alias = assign(key)
        sender_alias.append(alias)
        if addr:
            addr_aliases[addr] = alias
        if name and not ALIAS_PATTERN.fullmatch(name):
            name_aliases.setdefault(name, alias)
            for token in re.findall(r"[^\W\d_][\w'-]+", name):
                if token[0].isupper():
                    name_aliases.setdefault(token, alias)

    name_alt = "|".join(re.escape(n) for n in sorted(name_aliases, key=lambda s: (-len(s), s)))
    pattern = re.compile(
        r"(?P<addr>(?i:" + _EMAIL.pattern + r"))"
        + (r"|(?P<name>(?<![\w@.])(?:" + name_alt + r")(?![\w@]))" if name_alt else "")
    )

    def sub(match: re.Match) -> str:
        if match.group("addr"):
            addr = match.group("addr").lower()
            if addr not in addr_aliases:
                addr_aliases[addr] = assign(addr)
            return addr_aliases[addr]
        return name_aliases[match.group("name")]

    new_msgs = []
    for m, alias in zip(thread.messages, sender_alias):
        new_msgs.append(
            replace(m, sender=alias, body=pattern.sub(sub, m.body), subject=pattern.sub(sub, m.subject))
        )
    subject = pattern.sub(sub, thread.subject_normalized)
    return EmailThread(thread.thread_id, subject, tuple(new_msgs)), alias_by_identity


def write_threads(threads: Iterable[EmailThread], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in threads:
            fh.write(json.dumps(t.to_json(), ensure_ascii=False) + "\n")


def read_threads(path: str | Path) -> list[EmailThread]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(EmailThread.from_json(json.loads(line)))
    return out
