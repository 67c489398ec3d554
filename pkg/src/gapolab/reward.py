"""Group reward functions.

A group reward maps the whole group of G rollouts for one prompt to a
length-G reward vector. Per-rollout rewards (plain GRPO) are the special case
produced by :func:`per_sample_adapter`.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence, TextIO

import numpy as np

from .policy import Context, Rollout
from .task_gen import (ANSWER_CLOSE, ANSWER_OPEN, DatasetConfig, PromptSpec, ValidSet, Vocabulary,
                       generate_dataset, parse_answer, valid_set)


@dataclass
class Group:
    prompt: PromptSpec
    rollouts: list[Rollout]
    valid: ValidSet

    def __post_init__(self):
        if len(self.rollouts) < 2:
            raise ValueError(f"a group needs at least 2 rollouts, got {len(self.rollouts)}")

    @property
    def G(self) -> int:
        return len(self.rollouts)


class GroupRewardFunction(Protocol):
    def __call__(self, group: Group, rng: np.random.Generator | None = None) -> np.ndarray: ...


def frequency_reward(group: Group, rng: np.random.Generator | None = None) -> np.ndarray:
    """1 - (f_v - 1/L) for a valid answer v, -1 otherwise.

    f_v is the share of the group's *valid* rollouts that answered v.
    """
    answers = [r.parsed.item for r in group.rollouts]
    counts = Counter(a for a in answers if a is not None)
    n_valid = sum(counts.values())
    rewards = np.full(len(answers), -1.0)
    if n_valid == 0:
        return rewards
    u = 1.0 / group.valid.L
    for i, a in enumerate(answers):
        if a is not None:
            rewards[i] = 1.0 - (counts[a] / n_valid - u)
    return rewards


def correctness(rollout: Rollout) -> float:
    return 1.0 if rollout.parsed.valid else -1.0


def per_sample_adapter(reward_fn: Callable[[Rollout], float]) -> GroupRewardFunction:
    def group_fn(group: Group, rng: np.random.Generator | None = None) -> np.ndarray:
        return np.array([float(reward_fn(r)) for r in group.rollouts])

    group_fn.__name__ = f"per_sample({getattr(reward_fn, '__name__', 'fn')})"
    return group_fn


correctness_reward = per_sample_adapter(correctness)


@dataclass
class ContractReport:
    trials: int
    violations: list[tuple[int, str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def _random_group(vocab: Vocabulary, rng: np.random.Generator) -> tuple[Group, Group]:
    """Two groups with identical token content but different sampling log-probs."""
    prompt = generate_dataset(DatasetConfig(count=1), int(rng.integers(2**31)), vocab)[0]
    valid = valid_set(prompt, vocab)
    items = sorted(valid.valid_items)
    G = int(rng.integers(2, 9))
    seqs = []
    for _ in range(G):
        kind = rng.random()
        if kind < 0.7:
            seqs.append((ANSWER_OPEN, items[rng.integers(len(items))], ANSWER_CLOSE))
        else:
            seqs.append(tuple(int(t) for t in rng.integers(0, len(vocab), size=rng.integers(1, 5))))
    pair = []
    for _ in range(2):
        rolls = [Rollout(s, -rng.exponential(size=len(s)), parse_answer(s, valid)) for s in seqs]
        pair.append(Group(prompt, rolls, valid))
    return pair[0], pair[1]


def check_reward_contract(fn: GroupRewardFunction, trials: int, seed: int,
                          vocab: Vocabulary | None = None) -> ContractReport:
    """Empirically probe finiteness, parameter independence and determinism."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    vocab = vocab or Vocabulary()
    rng = np.random.default_rng(seed)
    report = ContractReport(trials)
    for k in range(trials):
        g1, g2 = _random_group(vocab, rng)
        reward_seed = int(rng.integers(2**31))
        r1 = np.asarray(fn(g1, np.random.default_rng(reward_seed)), dtype=float)
        r2 = np.asarray(fn(g2, np.random.default_rng(reward_seed)), dtype=float)
        r1b = np.asarray(fn(g1, np.random.default_rng(reward_seed)), dtype=float)
        if r1.shape != (g1.G,):
            report.violations.append((k, "shape", f"expected ({g1.G},), got {r1.shape}"))
            continue
        if not np.all(np.isfinite(r1)):
            report.violations.append((k, "finite", f"non-finite rewards {r1.tolist()}"))
        if not np.array_equal(r1, r2, equal_nan=True):
            report.violations.append((k, "parameter_independence", f"{r1.tolist()} != {r2.tolist()}"))
        if not np.array_equal(r1, r1b, equal_nan=True):
            report.violations.append((k, "determinism", f"{r1.tolist()} != {r1b.tolist()}"))
    return report


def write_reward_trace(fh: TextIO, group: Group, rewards: Sequence[float], vocab: Vocabulary) -> None:
    answers = [r.parsed.item for r in group.rollouts]
    fh.write(json.dumps({
        "prompt_hash": f"{Context.of(group.prompt, vocab).key:016x}",
        "parsed_answers": answers,
        "rewards": [float(x) for x in rewards],
        "valid_count": sum(a is not None for a in answers),
        "L": group.valid.L,
    }) + "\n")

