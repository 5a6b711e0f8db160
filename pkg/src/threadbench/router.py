"""Mixture-of-agents routing over pre-generated expert responses.

The router is a ``CategoricalPolicy`` over experts, fed hashed unigram and
bigram features of the question text and trained with GRPO on a +1/-1
correctness reward.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import SchemaViolation, ShapeMismatch
from .grpo import CategoricalPolicy, GrpoConfig, SparseVector, train_grpo

DEFAULT_FEATURE_DIM = 2 ** 14
ROUTER_CONFIG = GrpoConfig(group_size=8, learning_rate=1e-5, epochs=2, batch_size=8, weight_decay=0.1)


@dataclass(frozen=True)
class ResponseRecord:
    response_text: str
    is_correct: bool


@dataclass
class ExpertResponses:
    experts: list[str]
    question_ids: list[str]
    # cells[q][e]: the pre-generated records of expert e on question q, by run
    cells: list[list[list[ResponseRecord]]]

    def __post_init__(self):
        if len(self.experts) < 2:
            raise ShapeMismatch("need at least two experts")
        for q, row in zip(self.question_ids, self.cells):
            if len(row) != len(self.experts) or any(not cell for cell in row):
                raise ShapeMismatch(f"question {q!r} lacks a response for some expert")

    @property
    def expert_count(self) -> int:
        return len(self.experts)

    def correctness(self) -> np.ndarray:
        """M x N table from each cell's first record."""
        return np.array(
            [[row[e][0].is_correct for row in self.cells] for e in range(self.expert_count)], dtype=bool
        )

    @classmethod
    def from_records(cls, records: Sequence[Mapping]) -> "ExpertResponses":
        experts: list[str] = []
        qids: list[str] = []
        runs: dict[tuple[str, str], list[tuple[int, ResponseRecord]]] = {}
        for rec in records:
            q, e = str(rec["question_id"]), str(rec["expert"])
            if e not in experts:
                experts.append(e)
            if q not in qids:
                qids.append(q)
            runs.setdefault((q, e), []).append(
                (int(rec.get("run", 0)), ResponseRecord(str(rec.get("response", "")), bool(rec["is_correct"])))
            )
        cells = [
            [[r for _, r in sorted(runs.get((q, e), []), key=lambda t: t[0])] for e in experts]
            for q in qids
        ]
        return cls(experts, qids, cells)

    @classmethod
    def read_jsonl(cls, path: str | Path) -> "ExpertResponses":
        records = []
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except ValueError as exc:
                    raise SchemaViolation(f"invalid JSON: {exc}", n) from exc
                for key in ("question_id", "expert", "is_correct"):
                    if key not in rec:
                        raise SchemaViolation(f"missing field {key!r}", n)
                records.append(rec)
        return cls.from_records(records)


def complementarity(correctness: np.ndarray) -> np.ndarray:
    """(i, i): questions only expert i got right; (i, j): i right and j wrong."""
    c = np.asarray(correctness, dtype=bool)
    m = c.shape[0]
    out = (c[:, None, :] & ~c[None, :, :]).sum(axis=2)
    for i in range(m):
        others = np.delete(c, i, axis=0).any(axis=0)
        out[i, i] = int((c[i] & ~others).sum())
    return out.astype(int)


def union_accuracy(correctness: np.ndarray) -> float:
    c = np.asarray(correctness, dtype=bool)
    return float(c.any(axis=0).mean())


_TOKEN = re.compile(r"\w+")


def _bucket(key: str, dim: int) -> int:
    h = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(h, "little") & (dim - 1)


def featurize(question: str, dim: int = DEFAULT_FEATURE_DIM) -> SparseVector:
    if dim <= 0 or dim & (dim - 1):
        raise ValueError("feature dim must be a power of two")
    tokens = _TOKEN.findall(question.lower())
    counts: dict[int, float] = {}
    grams = [f"u:{t}" for t in tokens] + [f"b:{a} {b}" for a, b in zip(tokens, tokens[1:])]
    for g in grams:
        i = _bucket(g, dim)
        counts[i] = counts.get(i, 0.0) + 1.0
    idx = np.array(sorted(counts), dtype=np.int64)
    vals = np.array([counts[i] for i in idx], dtype=float)
    norm = np.linalg.norm(vals)
    if norm > 0:
        vals = vals / norm
    return SparseVector(idx, vals, dim)


def _question_texts(responses: ExpertResponses, questions: Mapping[str, str]) -> list[str]:
    missing = [q for q in responses.question_ids if q not in questions]
    if missing:
        raise ShapeMismatch(f"no question text for ids {missing[:5]}")
    return [questions[q] for q in responses.question_ids]


def train_router(
    responses: ExpertResponses,
    questions: Mapping[str, str],
    cfg: GrpoConfig = ROUTER_CONFIG,
    *,
    feature_dim: int = DEFAULT_FEATURE_DIM,
    seed: int = 0,
):
    texts = _question_texts(responses, questions)
    dataset = [(featurize(t, feature_dim), qi) for qi, t in enumerate(texts)]
    correct = responses.correctness()
    draw = random.Random(seed)

    def reward(action: int, qi: int) -> float:
        record = draw.choice(responses.cells[qi][action])
        return 1.0 if record.is_correct else -1.0

    policy = CategoricalPolicy.zeros(feature_dim, responses.expert_count)
    return train_grpo(
        policy, dataset, cfg, reward, seed=seed, correct_fn=lambda a, qi: bool(correct[a, qi])
    )


@dataclass
class RoutedEvalReport:
    accuracy: float
    union_accuracy: float
    expert_accuracy: list[float]
    selection_shares: list[float]
    best_expert: int
    baseline_accuracy: float
    routed_count: int
    routed_accuracy: float | None
    routed_baseline_accuracy: float | None
    non_routed_count: int
    non_routed_accuracy: float | None
    selections: list[int] = field(repr=False, default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def route(policy: CategoricalPolicy, texts: Sequence[str]) -> list[int]:
    return [policy.greedy(featurize(t, policy.feature_dim)) for t in texts]


def _mean(flags) -> float | None:
    flags = list(flags)
    return float(np.mean(flags)) if flags else None


def route_and_report(policy: CategoricalPolicy, responses: ExpertResponses, questions: Mapping[str, str]) -> RoutedEvalReport:
    """Greedy routing (ties to the lowest expert index) scored against the
    fixed best single expert."""
    texts = _question_texts(responses, questions)
    correct = responses.correctness()
    m, n = correct.shape
    picks = route(policy, texts)
    hit = [bool(correct[e, q]) for q, e in enumerate(picks)]
    expert_acc = correct.mean(axis=1)
    best = int(np.argmax(expert_acc))
    routed = [q for q in range(n) if picks[q] != best]
    kept = [q for q in range(n) if picks[q] == best]
    shares = np.bincount(picks, minlength=m) / n
    return RoutedEvalReport(
        accuracy=float(np.mean(hit)),
        union_accuracy=union_accuracy(correct),
        expert_accuracy=[float(a) for a in expert_acc],
        selection_shares=[float(s) for s in shares],
        best_expert=best,
        baseline_accuracy=float(expert_acc[best]),
        routed_count=len(routed),
        routed_accuracy=_mean(hit[q] for q in routed),
        routed_baseline_accuracy=_mean(bool(correct[best, q]) for q in routed),
        non_routed_count=len(kept),
        non_routed_accuracy=_mean(hit[q] for q in kept),
        selections=picks,
    )
