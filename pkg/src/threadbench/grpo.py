"""Numerical core: a linear-softmax categorical policy trained with GRPO.

Outputs in this setting are single tokens (one action per sample), so the
per-token average inside the objective has length one. The loop over tokens is
kept so the estimator reads the same way it would for sequences.

Conventions:

* advantages use the population standard deviation, zeroed below
  ``std_floor``;
* the KL penalty is the exact categorical KL(pi_theta || pi_ref);
* gradients through the clip are zero wherever the clipped branch is active;
* ascent on the objective is done as AdamW descent on its negation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ShapeMismatch
from .reward import LETTERS, score_response


class SparseVector(NamedTuple):
    indices: np.ndarray
    values: np.ndarray
    dim: int

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out


def _dim(x) -> int:
    return x.dim if isinstance(x, SparseVector) else int(np.shape(x)[0])


def _dot(x, w: np.ndarray) -> np.ndarray:
    if isinstance(x, SparseVector):
        return x.values @ w[x.indices]
    return np.asarray(x, dtype=float) @ w


def _outer_add(grad: np.ndarray, x, g: np.ndarray, scale: float = 1.0) -> None:
    if isinstance(x, SparseVector):
        grad[x.indices] += scale * np.outer(x.values, g)
    else:
        grad += scale * np.outer(np.asarray(x, dtype=float), g)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    return z - math.log(np.exp(z).sum())


@dataclass
class CategoricalPolicy:
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.ndim != 2:
            raise ShapeMismatch("weights must be a (features x actions) matrix")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("policy weights must be finite")

    @classmethod
    def zeros(cls, feature_dim: int, action_count: int) -> "CategoricalPolicy":
        return cls(np.zeros((feature_dim, action_count)))

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def action_count(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "CategoricalPolicy":
        return CategoricalPolicy(self.weights.copy())

    def check(self, x) -> None:
        if _dim(x) != self.feature_dim:
            raise ShapeMismatch(f"feature vector has dim {_dim(x)}, policy expects {self.feature_dim}")

    def logits(self, x) -> np.ndarray:
        self.check(x)
        return _dot(x, self.weights)

    def log_probs(self, x, temperature: float = 1.0) -> np.ndarray:
        return log_softmax(self.logits(x) / temperature)

    def probs(self, x, temperature: float = 1.0) -> np.ndarray:
        return np.exp(self.log_probs(x, temperature))

    def greedy(self, x) -> int:
        # np.argmax breaks ties toward the lowest index
        return int(np.argmax(self.logits(x)))

    def save(self, path: str | Path, **meta) -> None:
        np.savez(path, weights=self.weights, **{k: np.asarray(v) for k, v in meta.items()})

    @classmethod
    def load(cls, path: str | Path) -> tuple["CategoricalPolicy", dict]:
        with np.load(path, allow_pickle=False) as data:
            meta = {k: data[k] for k in data.files if k != "weights"}
            return cls(data["weights"]), meta


@dataclass(frozen=True)
class GroupSample:
    features: object
    actions: Sequence[int]
    old_logprobs: Sequence[float]
    ref_logprobs_full: np.ndarray
    rewards: Sequence[float]


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 4
    clip_eps: float = 0.2
    kl_beta: float = 0.005
    std_floor: float = 1e-8
    learning_rate: float = 1e-5
    epochs: int = 2
    sampling_temperature: float = 0.7
    batch_size: int = 1
    weight_decay: float = 0.0

    def __post_init__(self):
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must be in (0, 1)")
        if self.kl_beta < 0:
            raise ValueError("kl_beta must be >= 0")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "GrpoConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown GRPO config keys: {sorted(unknown)}")
        return cls(**data)


def group_advantages(rewards: Sequence[float], std_floor: float = 1e-8) -> np.ndarray:
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or r.size < 2:
        raise ShapeMismatch("need a group of at least 2 rewards")
    sigma = r.std()
    if sigma < std_floor:
        return np.zeros_like(r)
    return (r - r.mean()) / sigma


def clipped_term(ratio: float, advantage: float, eps: float) -> float:
    clipped = min(max(ratio, 1.0 - eps), 1.0 + eps)
    return min(ratio * advantage, clipped * advantage)


def _unclipped_active(ratio: float, advantage: float, eps: float) -> bool:
    if advantage > 0:
        return ratio <= 1.0 + eps
    if advantage < 0:
        return ratio >= 1.0 - eps
    return False


def kl_exact(policy_dist, ref_dist, floor: float = 1e-12) -> float:
    p = np.maximum(np.asarray(policy_dist, dtype=float), floor)
    q = np.maximum(np.asarray(ref_dist, dtype=float), floor)
    p, q = p / p.sum(), q / q.sum()
    return float(np.sum(p * (np.log(p) - np.log(q))))


def _check_sample(policy: CategoricalPolicy, s: GroupSample) -> None:
    policy.check(s.features)
    g = len(s.actions)
    if g < 2 or len(s.old_logprobs) != g or len(s.rewards) != g:
        raise ShapeMismatch("actions, old_logprobs and rewards must share a length >= 2")
    if np.shape(s.ref_logprobs_full) != (policy.action_count,):
        raise ShapeMismatch("ref_logprobs_full must hold one entry per action")
    if any(not 0 <= a < policy.action_count for a in s.actions):
        raise ShapeMismatch("action index out of range")
    if not np.all(np.isfinite(s.old_logprobs)):
        raise ValueError("old_logprobs must be finite")


def _group_terms(policy: CategoricalPolicy, s: GroupSample, cfg: GrpoConfig) -> tuple[float, np.ndarray, float]:
    """Objective contribution, d/dlogits of it, and the KL for one group."""
    logp = policy.log_probs(s.features)
    p = np.exp(logp)
    adv = group_advantages(s.rewards, cfg.std_floor)
    g = len(s.actions)
    surrogate = 0.0
    dz = np.zeros_like(p)
    for action, old_lp, a_i in zip(s.actions, s.old_logprobs, adv):
        tokens = ((action, old_lp),)
        for tok, tok_old in tokens:
            ratio = math.exp(logp[tok] - tok_old)
            surrogate += clipped_term(ratio, a_i, cfg.clip_eps) / (g * len(tokens))
            if _unclipped_active(ratio, a_i, cfg.clip_eps):
                w = a_i * ratio / (g * len(tokens))
                dz -= w * p
                dz[tok] += w
    ref_lp = np.asarray(s.ref_logprobs_full, dtype=float)
    kl = float(np.sum(p * (logp - ref_lp)))
    dkl = p * (logp - ref_lp - kl)
    return surrogate - cfg.kl_beta * kl, dz - cfg.kl_beta * dkl, kl


def grpo_objective(policy: CategoricalPolicy, batch: Sequence[GroupSample], cfg: GrpoConfig, executor=None):
    """Mean over groups of the clipped surrogate minus beta * KL, and its gradient.

    Groups are independent, so ``executor`` may evaluate them concurrently;
    the reduction always runs in batch order.
    """
    if not batch:
        raise ShapeMismatch("batch must be non-empty")
    for s in batch:
        _check_sample(policy, s)
    if executor is None:
        parts = [_group_terms(policy, s, cfg) for s in batch]
    else:
        parts = list(executor.map(lambda s: _group_terms(policy, s, cfg), batch))
    value = 0.0
    grad = np.zeros_like(policy.weights)
    for s, (v, dz, _) in zip(batch, parts):
        value += v
        _outer_add(grad, s.features, dz)
    n = len(batch)
    return value / n, grad / n


def sft_loss(policy: CategoricalPolicy, examples: Sequence[tuple[object, int]]):
    if not examples:
        raise ShapeMismatch("need at least one example")
    value = 0.0
    grad = np.zeros_like(policy.weights)
    for x, gold in examples:
        logp = policy.log_probs(x)
        value -= logp[gold]
        dz = np.exp(logp)
        dz[gold] -= 1.0
        _outer_add(grad, x, dz)
    n = len(examples)
    return value / n, grad / n


def finite_diff_grad(loss_fn: Callable[[np.ndarray], float], weights: np.ndarray, h: float = 1e-5) -> np.ndarray:
    if h <= 0:
        raise ValueError("h must be positive")
    w = np.array(weights, dtype=float)
    grad = np.zeros_like(w)
    flat, gflat = w.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn(w)
        flat[i] = orig - h
        down = loss_fn(w)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def zeros_like(cls, weights: np.ndarray, **kwargs) -> "AdamWState":
        return cls(np.zeros_like(weights, dtype=float), np.zeros_like(weights, dtype=float), **kwargs)


def adamw_step(weights: np.ndarray, gradient: np.ndarray, state: AdamWState, lr: float):
    w = np.asarray(weights, dtype=float)
    g = np.asarray(gradient, dtype=float)
    if w.shape != g.shape or state.m.shape != w.shape:
        raise ShapeMismatch(f"weights {w.shape}, gradient {g.shape}, state {state.m.shape}")
    b1, b2 = state.betas
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * g
    v = b2 * state.v + (1 - b2) * g * g
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    new_w = w
    if state.weight_decay:
        new_w = new_w - lr * state.weight_decay * new_w
    new_w = new_w - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_w, AdamWState(m, v, t, state.betas, state.eps, state.weight_decay)


# -- training ----------------------------------------------------------------


def letter_response(action: int) -> str:
    return f"<explanation>policy</explanation> <answer>{LETTERS[action]}</answer>"


def letter_reward(action: int, gold) -> float:
    """Score a sampled answer letter through the full reward path (1 or 3)."""
    gold_letter = LETTERS[gold] if isinstance(gold, (int, np.integer)) else gold
    return float(score_response(letter_response(action), gold_letter).total)


def _default_correct(action: int, gold) -> bool:
    if isinstance(gold, str):
        return LETTERS[action] == gold
    return action == int(gold)


@dataclass
class LogRow:
    step: int
    mean_reward: float
    objective: float
    kl: float
    accuracy: float


@dataclass
class TrainingLog:
    rows: list[LogRow] = field(default_factory=list)

    COLUMNS = ("step", "mean_reward", "objective", "kl", "accuracy")

    def append(self, row: LogRow) -> None:
        self.rows.append(row)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.COLUMNS)
            for r in self.rows:
                writer.writerow([r.step, repr(r.mean_reward), repr(r.objective), repr(r.kl), repr(r.accuracy)])


def greedy_accuracy(policy: CategoricalPolicy, dataset, correct_fn=_default_correct) -> float:
    if not dataset:
        return 0.0
    return sum(bool(correct_fn(policy.greedy(x), gold)) for x, gold in dataset) / len(dataset)


def train_grpo(
    policy: CategoricalPolicy,
    dataset: Sequence[tuple[object, object]],
    cfg: GrpoConfig,
    reward_adapter: Callable[[int, object], float] = letter_reward,
    *,
    seed: int = 0,
    correct_fn: Callable[[int, object], bool] = _default_correct,
):
    """On-policy GRPO with one objective evaluation and one AdamW step per batch.

    Actions are sampled at ``cfg.sampling_temperature``; the old log-probs are
    the untempered current policy's, so every update starts at ratio 1. The
    reference policy is frozen at the initial weights.
    """
    if not cfg.sampling_temperature > 0:
        raise ValueError("sampling_temperature must be > 0")
    if not dataset:
        raise ValueError("dataset must be non-empty")
    rng = np.random.default_rng(seed)
    ref = policy.copy()
    ref_lp = [ref.log_probs(x) for x, _ in dataset]
    current = policy.copy()
    state = AdamWState.zeros_like(current.weights, weight_decay=cfg.weight_decay)
    log = TrainingLog()
    step = 0
    k = current.action_count
    for _epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        objectives, rewards_seen, kls = [], [], []
        for start in range(0, len(order), cfg.batch_size):
            batch = []
            for idx in order[start:start + cfg.batch_size]:
                x, gold = dataset[idx]
                logp = current.log_probs(x)
                sample_p = current.probs(x, cfg.sampling_temperature)
                actions = rng.choice(k, size=cfg.group_size, p=sample_p)
                rewards = [reward_adapter(int(a), gold) for a in actions]
                rewards_seen.extend(rewards)
                p = np.exp(logp)
                kls.append(float(np.sum(p * (logp - ref_lp[idx]))))
                batch.append(GroupSample(x, [int(a) for a in actions], logp[actions], ref_lp[idx], rewards))
            value, grad = grpo_objective(current, batch, cfg)
            objectives.append(value)
            new_w, state = adamw_step(current.weights, -grad, state, cfg.learning_rate)
            current = CategoricalPolicy(new_w)
            step += 1
        log.append(
            LogRow(
                step=step,
                mean_reward=float(np.mean(rewards_seen)),
                objective=float(np.mean(objectives)),
                kl=float(np.mean(kls)),
                accuracy=greedy_accuracy(current, dataset, correct_fn),
            )
        )
    return current, log


def train_sft(
    policy: CategoricalPolicy,
    examples: Sequence[tuple[object, int]],
    *,
    learning_rate: float,
    epochs: int,
    batch_size: int = 16,
    weight_decay: float = 0.0,
    seed: int = 0,
) -> CategoricalPolicy:
    """Minibatch cross-entropy training with AdamW."""
    rng = np.random.default_rng(seed)
    current = policy.copy()
    state = AdamWState.zeros_like(current.weights, weight_decay=weight_decay)
    for _ in range(epochs):
        order = rng.permutation(len(examples))
        for start in range(0, len(order), batch_size):
            batch = [examples[i] for i in order[start:start + batch_size]]
            _, grad = sft_loss(current, batch)
            new_w, state = adamw_step(current.weights, grad, state, learning_rate)
            current = CategoricalPolicy(new_w)
    return current


def total_variation(p: Iterable[float], q: Iterable[float]) -> float:
    return 0.5 * float(np.sum(np.abs(np.asarray(p) - np.asarray(q))))
