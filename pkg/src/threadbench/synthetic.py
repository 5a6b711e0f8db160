"""Seeded toy worlds for desk-scale GRPO, SFT and router experiments."""

from __future__ import annotations

import random

import numpy as np

from .router import ExpertResponses


def separable_letters(n: int, seed: int = 0, noise_dims: int = 5) -> list[tuple[np.ndarray, int]]:
    """5-way data whose gold letter is fixed by one categorical feature.

    Layout: one-hot class block (5), Gaussian distractor features, bias.
    """
    rng = np.random.default_rng(seed)
    data = []
    for _ in range(n):
        c = int(rng.integers(5))
        x = np.concatenate([np.eye(5)[c], rng.normal(size=noise_dims), [1.0]])
        data.append((x, c))
    return data


def noisy_label_task(
    n_train: int = 200,
    n_test: int = 1000,
    noise_dims: int = 200,
    label_noise: float = 0.4,
    signal_noise: float = 0.5,
    seed: int = 0,
):
    """Train/test split where SFT targets carry label noise and RL sees clean rewards.

    The many weak distractor dimensions give a linear policy enough capacity
    to memorize the noisy training targets. Returns
    ``(train_x, clean_train_y, noisy_train_y, test_x, test_y)``.
    """
    rng = np.random.default_rng(seed)

    def draw(n):
        xs, ys = [], []
        for _ in range(n):
            c = int(rng.integers(5))
            informative = np.eye(5)[c] + rng.normal(scale=signal_noise, size=5)
            distract = rng.normal(size=noise_dims) / np.sqrt(noise_dims)
            xs.append(np.concatenate([informative, distract, [1.0]]))
            ys.append(c)
        return xs, ys

    train_x, train_y = draw(n_train)
    test_x, test_y = draw(n_test)
    noisy = [
        int((y + rng.integers(1, 5)) % 5) if rng.random() < label_noise else y for y in train_y
    ]
    return train_x, train_y, noisy, test_x, test_y


def _filler(rng: random.Random, vocab: list[str], k: int) -> list[str]:
    return [rng.choice(vocab) for _ in range(k)]


def marker_world(
    n: int,
    seed: int = 0,
    experts: int = 4,
    filler_words: int = 20,
    runs: int = 2,
    vocab_size: int = 300,
    weights=None,
):
    """Expert k is correct exactly on questions that contain ``marker{k}``."""
    rng = random.Random(seed)
    vocab = [f"word{i}" for i in range(vocab_size)]
    questions: dict[str, str] = {}
    records = []
    for q in range(n):
        k = rng.choices(range(experts), weights=weights)[0]
        words = _filler(rng, vocab, filler_words)
        words.insert(rng.randrange(len(words) + 1), f"marker{k}")
        qid = f"q{q:05d}"
        questions[qid] = " ".join(words)
        for e in range(experts):
            for run in range(runs):
                ok = e == k
                records.append({
                    "question_id": qid, "expert": f"expert{e}", "run": run,
                    "response": f"<explanation>x</explanation> <answer>{'a' if ok else 'b'}</answer>",
                    "is_correct": ok,
                })
    return ExpertResponses.from_records(records), questions


def dominant_world(n: int, seed: int = 0, experts: int = 4, strong: float = 0.9, weak: float = 0.3, runs: int = 2):
    """Expert 0 is right with probability ``strong`` per record, the rest ``weak``."""
    rng = random.Random(seed)
    vocab = [f"word{i}" for i in range(300)]
    questions: dict[str, str] = {}
    records = []
    for q in range(n):
        qid = f"q{q:05d}"
        questions[qid] = " ".join(_filler(rng, vocab, 15))
        for e in range(experts):
            p = strong if e == 0 else weak
            for run in range(runs):
                records.append({
                    "question_id": qid, "expert": f"expert{e}", "run": run,
                    "response": "", "is_correct": rng.random() < p,
                })
    return ExpertResponses.from_records(records), questions
