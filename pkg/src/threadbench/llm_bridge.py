"""Completion backends and the three model-driven pipeline steps.

Two backends share one surface, ``complete(request) -> str``:

* ``RemoteBackend`` talks to an OpenAI-compatible ``/chat/completions``
  endpoint with bounded exponential-backoff retries.
* ``MockBackend`` is an offline rule table, a pure function of the prompts
  and the seed. ``heuristic_mock`` builds one that runs the whole pipeline
  without a model.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import random
import re
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources
from typing import Callable, Sequence

import httpx

from .errors import (
    AliasLeak,
    AuthError,
    BackendTimeout,
    BackendUnavailable,
    GoldNotFound,
    LlmError,
    MalformedResponse,
    RateLimited,
    TooFewOptions,
    UnparseableModelOutput,
)
from .ingest import ALIAS_PATTERN, EmailThread

logger = logging.getLogger(__name__)

GOLD_MATCH_THRESHOLD = 0.5
RETRY_BACKOFF = (1.0, 2.0, 4.0)
_TRANSIENT_STATUS = {429, 500, 502, 503, 504}


def load_prompt(name: str) -> str:
    return resources.files(__package__).joinpath("assets", f"{name}.txt").read_text(encoding="utf-8")


@dataclass(frozen=True)
class CompletionRequest:
    system_prompt: str
    user_prompt: str
    # None leaves the decoding parameter at the backend's default
    temperature: float | None = 0.0
    max_tokens: int | None = 1024
    seed: int | None = None

    def __post_init__(self):
        t = self.temperature
        if t is not None and (not math.isfinite(t) or t < 0):
            raise ValueError(f"temperature must be finite and >= 0, got {t}")
        if self.max_tokens is not None and self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class QaTriple:
    question: str
    answer: str
    context: str = ""

    def to_json(self) -> dict:
        return {"question": self.question, "answer": self.answer, "context": self.context}


@dataclass(frozen=True)
class OptionSet:
    options: tuple[str, ...]
    correct_index: int

    def __post_init__(self):
        if len(self.options) != 5:
            raise TooFewOptions(f"need exactly 5 options, got {len(self.options)}")
        if not 0 <= self.correct_index < 5:
            raise ValueError(f"correct_index out of range: {self.correct_index}")
        normalized = {" ".join(o.split()) for o in self.options}
        if len(normalized) != 5:
            raise ValueError("options must be pairwise distinct")


# -- backends ----------------------------------------------------------------


@dataclass
class MockRule:
    """Reply with ``reply`` when ``pattern`` is found in the chosen prompt."""

    pattern: str
    reply: str | Callable[[CompletionRequest], str]
    target: str = "user"

    def matches(self, request: CompletionRequest) -> bool:
        text = request.user_prompt if self.target == "user" else request.system_prompt
        return re.search(self.pattern, text) is not None


class MockBackend:
    fixed_latency_ms = 0

    def __init__(self, rules: Sequence[MockRule] = (), default=None, seed: int = 0):
        self.rules = list(rules)
        self.default = default
        self.seed = seed

    def request_seed(self, request: CompletionRequest) -> int:
        base = self.seed if request.seed is None else request.seed
        digest = hashlib.sha256(
            f"{base}\x1f{request.system_prompt}\x1f{request.user_prompt}".encode("utf-8")
        ).digest()
        return int.from_bytes(digest[:8], "big")

    def complete(self, request: CompletionRequest) -> str:
        for rule in self.rules:
            if rule.matches(request):
                return rule.reply(request) if callable(rule.reply) else rule.reply
        if callable(self.default):
            return self.default(request)
        if self.default is not None:
            return self.default
        return ""

    def timed_complete(self, request: CompletionRequest) -> tuple[str, int]:
        return self.complete(request), self.fixed_latency_ms


@dataclass
class Telemetry:
    requests: int = 0
    retries: int = 0
    failures: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def add(self, **counts: int) -> None:
        with self._lock:
            for key, n in counts.items():
                setattr(self, key, getattr(self, key) + n)


class RemoteBackend:
    """Chat-completions client; the completion is the first choice's content."""

    def __init__(
        self,
        api_base: str,
        model: str,
        api_key: str | None = None,
        timeout: float = 120.0,
        backoff: Sequence[float] = RETRY_BACKOFF,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.api_base = api_base.rstrip("/")
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get("LLM_API_KEY")
        self.backoff = tuple(backoff)
        self.sleep = sleep
        self.telemetry = Telemetry()
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    def close(self) -> None:
        self._client.close()

    def _payload(self, request: CompletionRequest) -> dict:
        payload = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_prompt},
            ],
        }
        if request.temperature is not None:
            payload["temperature"] = request.temperature
        if request.max_tokens is not None:
            payload["max_tokens"] = request.max_tokens
        return payload

    def complete(self, request: CompletionRequest) -> str:
        url = f"{self.api_base}/chat/completions"
        payload = self._payload(request)
        self.telemetry.add(requests=1)
        attempts = len(self.backoff) + 1
        last: LlmError | None = None
        for attempt in range(attempts):
            if attempt:
                self.telemetry.add(retries=1)
                self.sleep(self.backoff[attempt - 1])
            try:
                resp = self._client.post(url, json=payload)
            except httpx.TimeoutException as exc:
                last = BackendTimeout(f"request timed out: {exc}", raw=None)
                continue
            except httpx.TransportError as exc:
                last = BackendUnavailable(f"transport error: {exc}", raw=None)
                continue
            if resp.status_code in (401, 403):
                self.telemetry.add(failures=1)
                raise AuthError(f"HTTP {resp.status_code}", raw=resp.text)
            if resp.status_code == 429:
                last = RateLimited("HTTP 429", raw=resp.text)
                continue
            if resp.status_code in _TRANSIENT_STATUS:
                last = BackendUnavailable(f"HTTP {resp.status_code}", raw=resp.text)
                continue
            if resp.status_code != 200:
                self.telemetry.add(failures=1)
                raise LlmError(f"HTTP {resp.status_code}", raw=resp.text)
            return self._parse(resp.text)
        self.telemetry.add(failures=1)
        assert last is not None
        raise last

    def _parse(self, body: str) -> str:
        try:
            data = json.loads(body)
            content = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"unexpected completion payload: {exc}", raw=body) from exc
        if not isinstance(content, str):
            raise MalformedResponse("completion content is not text", raw=body)
        return content

    def timed_complete(self, request: CompletionRequest) -> tuple[str, int]:
        start = time.perf_counter()
        text = self.complete(request)
        return text, int(round((time.perf_counter() - start) * 1000))


def complete(request: CompletionRequest, backend) -> str:
    return backend.complete(request)


# -- pipeline steps ----------------------------------------------------------


def render_thread(thread: EmailThread) -> str:
    lines = [f"Subject: {thread.subject_normalized}", ""]
    for n, m in enumerate(thread.messages, 1):
        stamp = datetime.fromtimestamp(m.date, tz=timezone.utc).strftime("%Y-%m-%d %H:%M UTC")
        lines.append(f"[Message {n}] From: {m.sender} | Date: {stamp}")
        lines.append(m.body.strip())
        lines.append("")
    return "\n".join(lines).rstrip() + "\n"


_FENCE = re.compile(r"```(?:json)?\s*\n(.*?)\n\s*```", re.S)


def _load_json_reply(text: str):
    stripped = text.strip()
    try:
        return json.loads(stripped)
    except ValueError:
        pass
    fenced = _FENCE.search(stripped)
    if fenced:
        try:
            return json.loads(fenced.group(1))
        except ValueError:
            pass
    raise UnparseableModelOutput("model reply is not JSON", raw=text)


def extract_triples(thread: EmailThread, backend, stats: Counter | None = None) -> list[QaTriple]:
    request = CompletionRequest(load_prompt("extract_system"), render_thread(thread))
    reply = backend.complete(request)
    data = _load_json_reply(reply)
    if isinstance(data, dict):
        data = data.get("triples", [data]) if "question" not in data else [data]
    if not isinstance(data, list):
        raise UnparseableModelOutput("expected a JSON array of records", raw=reply)
    triples = []
    for rec in data:
        ok = (
            isinstance(rec, dict)
            and all(isinstance(rec.get(k), str) for k in ("question", "answer"))
            and isinstance(rec.get("context", ""), str)
            and rec["question"].strip()
            and rec["answer"].strip()
        )
        if not ok:
            if stats is not None:
                stats["invalid_records"] += 1
            continue
        triples.append(
            QaTriple(rec["question"].strip(), rec["answer"].strip(), (rec.get("context") or "").strip())
        )
    if stats is not None:
        stats["triples"] += len(triples)
    return triples


def rewrite_input(triple: QaTriple) -> str:
    if triple.context:
        return f"Question context: {triple.context} Question: {triple.question}"
    return triple.question


def rewrite_question(triple: QaTriple, backend) -> str:
    system = load_prompt("rewrite_system")
    user = rewrite_input(triple)
    text = backend.complete(CompletionRequest(system, user)).strip()
    if not ALIAS_PATTERN.search(text):
        return text
    retry_system = system + "\nYour previous answer still named a person. Do not mention any person.\n"
    text = backend.complete(CompletionRequest(retry_system, user)).strip()
    if ALIAS_PATTERN.search(text):
        raise AliasLeak("rewritten question still contains alias tokens", raw=text)
    return text


def word_set(text: str) -> set[str]:
    return set(re.findall(r"\w+", text.lower()))


def token_jaccard(a: str, b: str) -> float:
    sa, sb = word_set(a), word_set(b)
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


_ENUMERATED = re.compile(r"^\s*(?:\(?[a-eA-E1-9]\s*[.):]|[-*•])\s+(.+?)\s*$")


def parse_options(reply: str) -> list[str]:
    try:
        data = _load_json_reply(reply)
    except UnparseableModelOutput:
        data = None
    if isinstance(data, dict):
        data = data.get("options")
    if isinstance(data, list) and all(isinstance(o, str) for o in data):
        return [o.strip() for o in data if o.strip()]
    options = [m.group(1) for m in map(_ENUMERATED.match, reply.splitlines()) if m]
    if not options:
        raise UnparseableModelOutput("no options found in model reply", raw=reply)
    return options


def generate_options(question: str, gold_answer: str, backend, threshold: float = GOLD_MATCH_THRESHOLD) -> OptionSet:
    if not question.strip() or not gold_answer.strip():
        raise ValueError("question and gold answer must be non-empty")
    # one line per field, so a multi-line answer cannot spill into the prompt layout
    user = f"Question: {question}\nCorrect answer: {' '.join(gold_answer.split())}"
    reply = backend.complete(CompletionRequest(load_prompt("options_system"), user))
    options: list[str] = []
    seen = set()
    for opt in parse_options(reply):
        key = " ".join(opt.split())
        if key not in seen:
            seen.add(key)
            options.append(opt)
    if len(options) < 5:
        raise TooFewOptions(f"model returned {len(options)} distinct options", raw=reply)
    scores = [token_jaccard(opt, gold_answer) for opt in options]
    best = max(range(len(options)), key=lambda i: (scores[i], -i))
    if scores[best] <= threshold:
        raise GoldNotFound(f"best gold overlap {scores[best]:.2f} <= {threshold}", raw=reply)
    if len(options) > 5:
        keep = sorted({best, *[i for i in range(len(options)) if i != best][:4]})
        options = [options[i] for i in keep]
        best = keep.index(best)
    return OptionSet(tuple(options), best)


# -- offline pipeline mock ---------------------------------------------------

_DISTRACTORS = (
    "The result is caused by a defective reagent lot, so the reagents should be replaced.",
    "The outcome is unrelated to the protocol and only reflects random experimental noise.",
    "Increasing the incubation temperature well above the recommended range will fix the problem.",
    "The cells are incompatible with the method, so no protocol change can help.",
    "Doubling every reagent concentration is the standard fix in this situation.",
    "This only happens with outdated sequencing, so resequencing will resolve it.",
    "The selection marker is irrelevant here and can simply be omitted.",
)
_MESSAGE_HEADER = re.compile(r"^\[Message \d+\] From: .*$", re.M)
_QUOTE_INTRO = re.compile(r"^On .{0,200}wrote:\s*$")


def _message_bodies(rendered: str) -> list[str]:
    chunks = _MESSAGE_HEADER.split(rendered)[1:]
    bodies = []
    for chunk in chunks:
        kept = [
            ln for ln in chunk.strip().splitlines()
            if not ln.lstrip().startswith(">") and not _QUOTE_INTRO.match(ln.strip())
        ]
        bodies.append(" ".join(" ".join(kept).split()))
    return bodies


def _strip_aliases(text: str) -> str:
    text = re.sub(r"(?:\b(?:Hi|Hello|Dear|Thanks|Thank you|Cheers|Best)\b,?\s*)?" + ALIAS_PATTERN.pattern + r",?", "", text)
    return " ".join(text.split())


def _mock_extract(request: CompletionRequest) -> str:
    bodies = [b for b in _message_bodies(request.user_prompt) if b]
    if len(bodies) < 2:
        return "[]"
    return json.dumps([{"question": bodies[0], "answer": bodies[1], "context": " ".join(bodies[2:])}])


def _mock_rewrite(request: CompletionRequest) -> str:
    text = request.user_prompt
    m = re.match(r"Question context: (.*) Question: (.*)$", text, re.S)
    if m:
        text = m.group(2)
    return _strip_aliases(text)


def _mock_options(rng: random.Random, request: CompletionRequest) -> str:
    m = re.search(r"^Correct answer: (.*)$", request.user_prompt, re.M)
    gold = m.group(1).strip() if m else ""
    options = rng.sample(_DISTRACTORS, 4) + [gold]
    return json.dumps(options)


def heuristic_mock(seed: int = 0) -> MockBackend:
    """Deterministic stand-in model for offline pipeline runs.

    Extraction takes the first message as the question and the first reply as
    the answer; rewriting drops the context block and alias tokens; options are
    the gold answer plus four canned distractors chosen by the request seed.
    """
    backend = MockBackend(seed=seed)

    def options_reply(request: CompletionRequest) -> str:
        return _mock_options(random.Random(backend.request_seed(request)), request)

    backend.rules = [
        MockRule(r"^### task: extract_triples", _mock_extract, target="system"),
        MockRule(r"^### task: rewrite_question", _mock_rewrite, target="system"),
        MockRule(r"^### task: generate_options", options_reply, target="system"),
    ]
    return backend
