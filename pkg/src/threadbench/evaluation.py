"""Evaluation harness: prompting, journaled runs, accuracy, Pass@K, strata."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import InsufficientRuns
from .llm_bridge import CompletionRequest, MockBackend, MockRule, load_prompt
from .mcq import McqItem, encode_answer
from .reward import LETTERS, RewardBreakdown, score_response

logger = logging.getLogger(__name__)

UNASSIGNED = "Unassigned"


def build_prompt(item: McqItem) -> tuple[str, str]:
    return load_prompt("eval_system"), item.question_text


@dataclass(frozen=True)
class EvalRecord:
    question_id: str
    run_index: int
    raw_response: str
    extracted_label: str | None
    correct: bool
    reward: RewardBreakdown
    latency_ms: int = 0

    @property
    def invalid(self) -> bool:
        return self.reward.invalid

    def to_json(self) -> dict:
        d = asdict(self)
        d["reward"] = self.reward.to_json()
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "EvalRecord":
        return cls(
            question_id=obj["question_id"],
            run_index=int(obj["run_index"]),
            raw_response=obj["raw_response"],
            extracted_label=obj["extracted_label"],
            correct=bool(obj["correct"]),
            reward=RewardBreakdown(**obj["reward"]),
            latency_ms=int(obj.get("latency_ms", 0)),
        )


def run_seed(seed: int, question_id: str, run: int) -> int:
    digest = hashlib.sha256(f"{seed}:{question_id}:{run}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


def read_journal(path: str | Path) -> list[EvalRecord]:
    """Completed records; a torn trailing line from a killed run is ignored."""
    records = []
    p = Path(path)
    if not p.exists():
        return records
    with open(p, encoding="utf-8") as fh:
        for line in fh:
            if not line.endswith("\n"):
                break
            try:
                records.append(EvalRecord.from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError):
                logger.warning("skipping unreadable journal line")
    return records


def _repair_journal(path: Path) -> None:
    """Cut a torn trailing line so appends start on a fresh line."""
    data = path.read_bytes()
    if data and not data.endswith(b"\n"):
        path.write_bytes(data[: data.rfind(b"\n") + 1])


def evaluate_one(item: McqItem, run: int, backend, seed: int = 0, temperature: float | None = None) -> EvalRecord:
    system, user = build_prompt(item)
    request = CompletionRequest(
        system, user, temperature=temperature, max_tokens=None, seed=run_seed(seed, item.id, run)
    )
    if hasattr(backend, "timed_complete"):
        text, latency = backend.timed_complete(request)
    else:
        text, latency = backend.complete(request), 0
    breakdown = score_response(text, item.correct_label)
    return EvalRecord(
        question_id=item.id,
        run_index=run,
        raw_response=text,
        extracted_label=breakdown.extracted_label,
        correct=breakdown.extracted_label == item.correct_label,
        reward=breakdown,
        latency_ms=latency,
    )


def run_eval(
    items: Sequence[McqItem],
    backend,
    runs: int,
    *,
    journal: str | Path | None = None,
    parallelism: int = 1,
    seed: int = 0,
    temperature: float | None = None,
) -> list[EvalRecord]:
    """One record per (item, run), appended to ``journal`` as it completes.

    Pairs already in the journal are not re-requested; a backend failure
    propagates and leaves the journal resumable.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    done: dict[tuple[str, int], EvalRecord] = {}
    journal_path = Path(journal) if journal is not None else None
    if journal_path is not None:
        for rec in read_journal(journal_path):
            done.setdefault((rec.question_id, rec.run_index), rec)
        if journal_path.exists():
            _repair_journal(journal_path)
    todo = [(it, r) for it in items for r in range(runs) if (it.id, r) not in done]
    lock = threading.Lock()
    fh = open(journal_path, "a", encoding="utf-8", newline="\n") if journal_path is not None else None

    def work(pair):
        item, run = pair
        rec = evaluate_one(item, run, backend, seed, temperature)
        with lock:
            done[(item.id, run)] = rec
            if fh is not None:
                fh.write(json.dumps(rec.to_json(), ensure_ascii=False) + "\n")
                fh.flush()
        return rec

    try:
        if parallelism == 1:
            for pair in todo:
                work(pair)
        else:
            with ThreadPoolExecutor(max_workers=parallelism) as pool:
                # list() re-raises the first worker failure
                list(pool.map(work, todo))
    finally:
        if fh is not None:
            fh.close()
    return [done[(it.id, r)] for it in items for r in range(runs) if (it.id, r) in done]


def pass_at_k(records: Iterable[EvalRecord], ks: Sequence[int]) -> dict[int, float]:
    """Fraction of items with a correct answer among runs 0..K-1."""
    by_item: dict[str, dict[int, bool]] = {}
    for rec in records:
        by_item.setdefault(rec.question_id, {})[rec.run_index] = rec.correct
    if not by_item:
        raise InsufficientRuns("no records")
    table = {}
    for k in ks:
        if k < 1:
            raise ValueError("K must be >= 1")
        solved = 0
        for qid, runs in by_item.items():
            if any(r not in runs for r in range(k)):
                raise InsufficientRuns(f"item {qid} has fewer than {k} runs")
            solved += any(runs[r] for r in range(k))
        table[k] = solved / len(by_item)
    return table


@dataclass
class Stratum:
    n: int = 0
    correct: int = 0

    @property
    def accuracy(self) -> float:
        return self.correct / self.n if self.n else 0.0


@dataclass
class EvalReport:
    n_items: int
    n_records: int
    accuracy: float
    invalid_rate: float
    per_category: dict[str, Stratum]
    per_difficulty: dict[str, Stratum]
    pass_at_k: dict[int, float]
    gold_histogram: dict[str, int]
    predicted_histogram: dict[str, int] = field(default_factory=dict)
    seed: int | None = None

    def to_json(self) -> dict:
        def strata(d):
            return {k: {"n": s.n, "correct": s.correct, "accuracy": s.accuracy} for k, s in d.items()}

        return {
            "seed": self.seed,
            "n_items": self.n_items,
            "n_records": self.n_records,
            "accuracy": self.accuracy,
            "invalid_rate": self.invalid_rate,
            "per_category": strata(self.per_category),
            "per_difficulty": strata(self.per_difficulty),
            "pass_at_k": {str(k): v for k, v in self.pass_at_k.items()},
            "gold_histogram": self.gold_histogram,
            "predicted_histogram": self.predicted_histogram,
        }

    def csv_rows(self) -> list[list]:
        rows = [["section", "key", "n", "value"]]
        rows.append(["overall", "accuracy", self.n_records, self.accuracy])
        rows.append(["overall", "invalid_rate", self.n_records, self.invalid_rate])
        for k, s in self.per_category.items():
            rows.append(["category", k, s.n, s.accuracy])
        for k, s in self.per_difficulty.items():
            rows.append(["difficulty", k, s.n, s.accuracy])
        for k, v in self.pass_at_k.items():
            rows.append(["pass_at_k", k, self.n_items, v])
        for k, v in self.gold_histogram.items():
            rows.append(["gold_label", k, v, v / self.n_items if self.n_items else 0.0])
        return rows

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")
        with open(out / "report.csv", "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerows(self.csv_rows())


def report(records: Sequence[EvalRecord], items: Sequence[McqItem], ks: Sequence[int] = (), seed: int | None = None) -> EvalReport:
    by_id = {it.id: it for it in items}
    missing = {r.question_id for r in records} - set(by_id)
    if missing:
        raise ValueError(f"records reference unknown items: {sorted(missing)[:5]}")
    per_cat: dict[str, Stratum] = {}
    per_diff: dict[str, Stratum] = {}
    predicted = {letter: 0 for letter in LETTERS}
    predicted["invalid"] = 0
    correct = invalid = 0
    for rec in records:
        item = by_id[rec.question_id]
        cat = item.category.value if item.category else UNASSIGNED
        diff = item.difficulty.value if item.difficulty else UNASSIGNED
        for table, key in ((per_cat, cat), (per_diff, diff)):
            s = table.setdefault(key, Stratum())
            s.n += 1
            s.correct += rec.correct
        correct += rec.correct
        invalid += rec.invalid
        predicted[rec.extracted_label or "invalid"] += 1
    gold = {letter: 0 for letter in LETTERS}
    for it in items:
        gold[it.correct_label] += 1
    n = len(records)
    return EvalReport(
        n_items=len(items),
        n_records=n,
        accuracy=correct / n if n else 0.0,
        invalid_rate=invalid / n if n else 0.0,
        per_category=dict(sorted(per_cat.items())),
        per_difficulty=dict(sorted(per_diff.items())),
        pass_at_k=pass_at_k(records, ks) if ks else {},
        gold_histogram=gold,
        predicted_histogram=predicted,
        seed=seed,
    )


# -- mock backends for offline evaluation ------------------------------------


def gold_mock(items: Sequence[McqItem]) -> MockBackend:
    """Answers every known item correctly in the strict format."""
    answers = {it.question_text: encode_answer("mock reasoning", it.correct_label) for it in items}
    return MockBackend(default=lambda req: answers.get(req.user_prompt, "I do not know."))


def untagged_mock() -> MockBackend:
    return MockBackend(default="I think the second option is most likely right, because of the controls.")


def random_mock(seed: int = 0) -> MockBackend:
    """Well-formed answers with a letter drawn from the per-request seed."""
    backend = MockBackend(seed=seed)

    def reply(req: CompletionRequest) -> str:
        letter = LETTERS[backend.request_seed(req) % 5]
        return encode_answer("mock reasoning", letter)

    backend.rules = [MockRule(r".", reply)]
    return backend
