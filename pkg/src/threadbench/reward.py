"""Rule-based response scoring: +1 for strict format, +2 for the right letter.

The strict format is a full match of::

    \\s* <explanation>BODY</explanation> \\s* <answer>L</answer> \\s*

where BODY contains no ``<explanation>``/``<answer>`` tags (open or close)
and L is a single lowercase letter a-e with no padding. Answer extraction for
correctness is looser: the last ``<answer>...</answer>`` pair wins, inner
whitespace is trimmed and the letter is matched case-insensitively.
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass

from .errors import InvalidGold

LETTERS = ("a", "b", "c", "d", "e")

_TAG = r"</?(?:explanation|answer)>"
FORMAT_PATTERN = re.compile(
    r"\s*<explanation>(?:(?!" + _TAG + r").)*</explanation>\s*<answer>[a-e]</answer>\s*",
    re.S,
)
_ANSWER = re.compile(r"<answer>(.*?)</answer>", re.S | re.I)


@dataclass(frozen=True)
class RewardBreakdown:
    format_reward: int
    correctness_reward: int
    total: int
    extracted_label: str | None
    invalid: bool

    def to_json(self) -> dict:
        return asdict(self)


def extract_answer(response: str) -> str | None:
    matches = _ANSWER.findall(response)
    if not matches:
        return None
    label = matches[-1].strip().lower()
    return label if label in LETTERS else None


def format_ok(response: str) -> bool:
    return FORMAT_PATTERN.fullmatch(response) is not None


def score_response(response: str, gold: str) -> RewardBreakdown:
    if not isinstance(gold, str) or gold.strip().lower() not in LETTERS:
        raise InvalidGold(f"gold label must be one of a-e, got {gold!r}")
    gold = gold.strip().lower()
    label = extract_answer(response)
    fmt = 1 if format_ok(response) else 0
    correct = 2 if label is not None and label == gold else 0
    return RewardBreakdown(fmt, correct, fmt + correct, label, label is None)
