"""Quality control, category/difficulty annotation and the train/test split."""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field, replace
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import NamedTuple, Sequence

from .config import load_toml, loads_toml
from .errors import ConfigError
from .llm_bridge import QaTriple
from .mcq import Category, Difficulty, McqItem

NO_ANSWER_PHRASES = ("no answer", "unanswered", "no response")
BARE_CONFIRMATIONS = frozenset({
    "yes", "yep", "yeah", "yup", "ok", "okay", "sure", "agreed", "confirmed",
    "correct", "right", "exactly", "indeed", "thanks", "thank you", "thanks a lot",
    "same here", "me too", "+1", "will do", "got it", "noted",
})

_URL = re.compile(r"(?:https?://|www\.)\S+", re.I)
_WORD = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class KeywordTable:
    categories: tuple[tuple[Category, tuple[re.Pattern, ...]], ...]
    fallback: Category = Category.LOGISTICS
    medium_words: int = 30
    hard_words: int = 60
    conditional: tuple[re.Pattern, ...] = ()
    uncertainty: tuple[re.Pattern, ...] = ()


@dataclass(frozen=True)
class QualityRules:
    min_words: int = 6
    vague_plea: tuple[re.Pattern, ...] = ()
    off_topic: tuple[re.Pattern, ...] = ()


def _compile(patterns, where: str) -> tuple[re.Pattern, ...]:
    try:
        return tuple(re.compile(p) for p in patterns)
    except re.error as exc:
        raise ConfigError(f"bad pattern in {where}: {exc}") from exc


def tables_from_dict(cfg: dict) -> tuple[KeywordTable, QualityRules]:
    cats = []
    for entry in cfg.get("categories", []):
        try:
            cat = Category(entry["name"])
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"unknown category entry {entry!r}") from exc
        patterns = _compile(entry.get("patterns", []), cat.value)
        if not patterns:
            raise ConfigError(f"category {cat.value} has no patterns")
        cats.append((cat, patterns))
    missing = set(Category) - {c for c, _ in cats}
    if missing:
        raise ConfigError(f"categories without patterns: {sorted(c.value for c in missing)}")
    diff = cfg.get("difficulty", {})
    qual = cfg.get("quality", {})
    table = KeywordTable(
        categories=tuple(cats),
        fallback=Category(cfg.get("fallback_category", Category.LOGISTICS.value)),
        medium_words=int(diff.get("medium_words", 30)),
        hard_words=int(diff.get("hard_words", 60)),
        conditional=_compile(diff.get("conditional", []), "difficulty.conditional"),
        uncertainty=_compile(diff.get("uncertainty", []), "difficulty.uncertainty"),
    )
    rules = QualityRules(
        min_words=int(qual.get("min_words", 6)),
        vague_plea=_compile(qual.get("vague_plea", []), "quality.vague_plea"),
        off_topic=_compile(qual.get("off_topic", []), "quality.off_topic"),
    )
    return table, rules


def default_tables() -> tuple[KeywordTable, QualityRules]:
    text = resources.files(__package__).joinpath("assets", "curation.toml").read_text(encoding="utf-8")
    return tables_from_dict(loads_toml(text))


def load_tables(path: str | Path | None) -> tuple[KeywordTable, QualityRules]:
    return default_tables() if path is None else tables_from_dict(load_toml(path))


# -- filters -----------------------------------------------------------------


def unanswered_reason(answer: str) -> str | None:
    text = answer.strip()
    if not text:
        return "empty"
    lowered = text.lower()
    if any(p in lowered for p in NO_ANSWER_PHRASES):
        return "no_answer_phrase"
    if " ".join(re.sub(r"[^\w\s+]", " ", lowered).split()) in BARE_CONFIRMATIONS:
        return "bare_confirmation"
    return None


def drop_unanswered(triples: Sequence[QaTriple]) -> tuple[list[QaTriple], list[tuple[QaTriple, str]]]:
    kept, dropped = [], []
    for t in triples:
        reason = unanswered_reason(t.answer)
        if reason is None:
            kept.append(t)
        else:
            dropped.append((t, reason))
    return kept, dropped


def shingles(text: str, n: int = 3) -> frozenset[tuple[str, ...]]:
    tokens = _WORD.findall(text.lower())
    if len(tokens) < n:
        return frozenset([tuple(tokens)]) if tokens else frozenset()
    return frozenset(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def jaccard(a: frozenset, b: frozenset) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def near_dedup(items: Sequence[McqItem], threshold: float = 0.9) -> tuple[list[McqItem], list[list[str]]]:
    """Merge items whose question-stem 3-gram Jaccard is >= threshold.

    Groups are connected components of the similarity graph, so two kept items
    are always below threshold and a second pass changes nothing.
    """
    if not 0 < threshold <= 1:
        raise ValueError("threshold must be in (0, 1]")
    grams = [shingles(it.stem) for it in items]
    parent = list(range(len(items)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    postings: dict[tuple, list[int]] = {}
    for i, g in enumerate(grams):
        candidates = set()
        for gram in g:
            candidates.update(postings.get(gram, ()))
        if not g:
            candidates.update(j for j in range(i) if not grams[j])
        for j in sorted(candidates):
            a, b = grams[i], grams[j]
            if min(len(a), len(b)) < threshold * max(len(a), len(b)):
                continue
            if jaccard(a, b) >= threshold:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
        for gram in g:
            postings.setdefault(gram, []).append(i)

    groups: dict[int, list[int]] = {}
    for i in range(len(items)):
        groups.setdefault(find(i), []).append(i)
    keep = {min(members, key=lambda k: items[k].id) for members in groups.values()}
    kept = [it for i, it in enumerate(items) if i in keep]
    dup_groups = [sorted(items[k].id for k in members) for members in groups.values() if len(members) > 1]
    return kept, dup_groups


def low_quality_reason(question: str, rules: QualityRules) -> str | None:
    text = question.strip()
    lowered = text.lower()
    if not _URL.sub(" ", text).strip(" \t\n.,;:!?()[]<>-"):
        return "link_only"
    if any(p.search(lowered) for p in rules.vague_plea):
        return "vague_plea"
    if any(p.search(lowered) for p in rules.off_topic):
        return "off_topic"
    if len(text.split()) < rules.min_words:
        return "min_length"
    return None


def drop_low_quality(items: Sequence[McqItem], rules: QualityRules | None = None):
    rules = rules or default_tables()[1]
    kept, dropped = [], []
    for it in items:
        reason = low_quality_reason(it.stem, rules)
        if reason is None:
            kept.append(it)
        else:
            dropped.append((it, reason))
    return kept, dropped


# -- annotation --------------------------------------------------------------


class CategoryMatch(NamedTuple):
    category: Category
    fallback: bool
    pattern: str | None


def assign_category(question: str, table: KeywordTable) -> CategoryMatch:
    lowered = question.lower()
    for cat, patterns in table.categories:
        for p in patterns:
            if p.search(lowered):
                return CategoryMatch(cat, False, p.pattern)
    return CategoryMatch(table.fallback, True, None)


def difficulty_score(question: str, table: KeywordTable) -> int:
    wc = len(question.split())
    lowered = question.lower()
    score = int(wc > table.medium_words) + int(wc > table.hard_words)
    score += sum(len(p.findall(lowered)) for p in table.conditional)
    score += sum(len(p.findall(lowered)) for p in table.uncertainty)
    return score


def assign_difficulty(question: str, table: KeywordTable) -> Difficulty:
    score = difficulty_score(question, table)
    if score == 0:
        return Difficulty.EASY
    return Difficulty.MEDIUM if score <= 2 else Difficulty.HARD


@dataclass
class AnnotationReport:
    items: int = 0
    fallback: int = 0
    categories: dict[str, int] = field(default_factory=dict)
    difficulties: dict[str, int] = field(default_factory=dict)

    @property
    def fallback_fraction(self) -> float:
        return self.fallback / self.items if self.items else 0.0


def annotate(items: Sequence[McqItem], table: KeywordTable) -> tuple[list[McqItem], AnnotationReport]:
    report = AnnotationReport()
    out = []
    for it in items:
        match = assign_category(it.stem, table)
        diff = assign_difficulty(it.stem, table)
        report.items += 1
        report.fallback += match.fallback
        report.categories[match.category.value] = report.categories.get(match.category.value, 0) + 1
        report.difficulties[diff.value] = report.difficulties.get(diff.value, 0) + 1
        out.append(replace(it, category=match.category, difficulty=diff))
    return out, report


def split_dataset(items: Sequence[McqItem], test_fraction: float, seed: int):
    """Seeded shuffle, then the first floor(test_fraction * N) go to test.

    Both halves keep the input order and carry their split tag.
    """
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must be in (0, 1)")
    n = len(items)
    n_test = int(Fraction(str(test_fraction)) * n)
    order = list(range(n))
    random.Random(seed).shuffle(order)
    test_idx = set(order[:n_test])
    train = [replace(it, split="train") for i, it in enumerate(items) if i not in test_idx]
    test = [replace(it, split="test") for i, it in enumerate(items) if i in test_idx]
    return train, test
