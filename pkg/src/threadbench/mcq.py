"""Multiple-choice item assembly, answer-tag encoding and JSONL persistence."""

from __future__ import annotations

import hashlib
import json
import random
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable

from .errors import BadLabel, InvalidLabel, MissingTags, SchemaViolation
from .llm_bridge import OptionSet
from .reward import LETTERS

OPTIONS_INTRO = "Please choose one of the following options:"


class Category(str, Enum):
    VALIDATION = "Validation/Troubleshooting&Optimization"
    CLONING = "Cloning&PlasmidConstruction"
    ENZYME = "GeneEditingEnzymeSelection"
    GUIDE_RNA = "GuideRnaDesign"
    SCREENING = "Screening&LibraryDesign"
    DELIVERY = "GeneEditingDeliveryMethods"
    LOGISTICS = "PracticalLabLogistics"


class Difficulty(str, Enum):
    EASY = "Easy"
    MEDIUM = "Medium"
    HARD = "Hard"


@dataclass(frozen=True)
class McqItem:
    id: str
    question_text: str
    options: tuple[str, ...]
    correct_label: str
    explanation: str
    category: Category | None = None
    difficulty: Difficulty | None = None
    split: str | None = None

    @property
    def stem(self) -> str:
        """The question without its rendered option block."""
        return self.question_text.split("\n" + OPTIONS_INTRO, 1)[0].strip()

    @property
    def gold_text(self) -> str:
        return self.options[LETTERS.index(self.correct_label)]

    @property
    def answer(self) -> str:
        return encode_answer(self.explanation, self.correct_label)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "question": self.question_text,
            "options": list(self.options),
            "correct_label": self.correct_label,
            "explanation": self.explanation,
            "category": self.category.value if self.category else None,
            "difficulty": self.difficulty.value if self.difficulty else None,
            "split": self.split,
        }


def item_id(question: str, options: Iterable[str]) -> str:
    key = question + "\x1e" + "\x1f".join(sorted(options))
    return hashlib.sha256(key.encode("utf-8")).hexdigest()[:16]


def shuffle_draws(seed: int, n: int = 5) -> list[int]:
    """Per-step offsets of a forward Fisher-Yates pass; all zeros is identity."""
    rng = random.Random(seed)
    return [rng.randrange(n - i) for i in range(n - 1)]


def permutation_from_draws(draws: list[int], n: int = 5) -> list[int]:
    """``perm[p]`` is the original index of the option shown at position ``p``."""
    perm = list(range(n))
    for i, offset in enumerate(draws):
        j = i + offset
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def render_question(question: str, options: Iterable[str]) -> str:
    lines = [question.strip(), OPTIONS_INTRO]
    lines += [f"{letter}. {opt}" for letter, opt in zip(LETTERS, options)]
    return "\n".join(lines)


def assemble_mcq(question: str, opts: OptionSet, explanation: str, seed: int) -> McqItem:
    perm = permutation_from_draws(shuffle_draws(seed))
    shuffled = tuple(opts.options[k] for k in perm)
    label = LETTERS[perm.index(opts.correct_index)]
    return McqItem(
        id=item_id(question, opts.options),
        question_text=render_question(question, shuffled),
        options=shuffled,
        correct_label=label,
        explanation=explanation,
    )


def encode_answer(explanation: str, label: str) -> str:
    if label not in LETTERS:
        raise InvalidLabel(f"label must be one of a-e, got {label!r}")
    return f"<explanation>{explanation}</explanation> <answer>{label}</answer>"


_ENCODED = re.compile(r"\s*<explanation>(.*)</explanation>\s*<answer>(.*?)</answer>\s*", re.S)


def decode_answer(encoded: str) -> tuple[str, str]:
    m = _ENCODED.fullmatch(encoded)
    if not m:
        raise MissingTags("expected <explanation>...</explanation> <answer>...</answer>")
    explanation, label = m.groups()
    if label not in LETTERS:
        raise BadLabel(f"answer label {label!r} is not one of a-e")
    return explanation, label


# -- JSONL -------------------------------------------------------------------

_REQUIRED = ("id", "question", "options", "correct_label", "explanation")


def item_from_json(obj, line: int | None = None) -> McqItem:
    if not isinstance(obj, dict):
        raise SchemaViolation("record is not a JSON object", line)
    for key in _REQUIRED:
        if key not in obj:
            raise SchemaViolation(f"missing field {key!r}", line)
    opts = obj["options"]
    if not isinstance(opts, list) or len(opts) != 5 or not all(isinstance(o, str) for o in opts):
        raise SchemaViolation("'options' must be a list of 5 strings", line)
    if obj["correct_label"] not in LETTERS:
        raise SchemaViolation(f"bad correct_label {obj['correct_label']!r}", line)
    for key in ("id", "question", "explanation"):
        if not isinstance(obj[key], str):
            raise SchemaViolation(f"{key!r} must be a string", line)
    try:
        category = Category(obj["category"]) if obj.get("category") else None
        difficulty = Difficulty(obj["difficulty"]) if obj.get("difficulty") else None
    except ValueError as exc:
        raise SchemaViolation(str(exc), line) from exc
    split = obj.get("split")
    if split not in (None, "train", "test"):
        raise SchemaViolation(f"bad split {split!r}", line)
    return McqItem(
        id=obj["id"],
        question_text=obj["question"],
        options=tuple(opts),
        correct_label=obj["correct_label"],
        explanation=obj["explanation"],
        category=category,
        difficulty=difficulty,
        split=split,
    )


def write_items(items: Iterable[McqItem], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for item in items:
            fh.write(json.dumps(item.to_json(), ensure_ascii=False) + "\n")


def read_items(path: str | Path) -> list[McqItem]:
    items = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except ValueError as exc:
                raise SchemaViolation(f"invalid JSON: {exc}", n) from exc
            items.append(item_from_json(obj, n))
    return items


def jsonl_roundtrip(items: list[McqItem], path: str | Path) -> list[McqItem]:
    write_items(items, path)
    return read_items(path)
