"""Evaluation protocols: list uniformity, open-set coverage, free-generation diversity."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import metrics
from .policy import DecodeConfig, Policy, sample_batch
from .task_gen import PromptSpec, valid_set


@dataclass
class UniformityResult:
    per_list_jsd: list[float]
    per_list_unique: list[int]
    per_list_entropy: list[float]
    valid_fraction: float

    @property
    def jsd(self) -> float:
        return float(np.mean(self.per_list_jsd))

    @property
    def unique(self) -> float:
        return float(np.mean(self.per_list_unique))

    @property
    def entropy(self) -> float:
        return float(np.mean(self.per_list_entropy))


def uniformity(policy: Policy, prompts: Sequence[PromptSpec], n_samples: int, decode: DecodeConfig,
               rng: np.random.Generator) -> UniformityResult:
    """Sample each prompt ``n_samples`` times; JSD of the answer histogram to uniform."""
    jsd, uniq, ent, valid = [], [], [], []
    for p in prompts:
        vs = valid_set(p, policy.vocab)
        answers = [r.parsed for r in sample_batch(policy, p, decode, rng, n_samples)]
        dist = metrics.empirical_distribution(answers, vs)
        jsd.append(metrics.jsd_to_uniform(dist, vs.L))
        uniq.append(len({a.item for a in answers if a.valid}))
        ent.append(metrics.entropy(dist))
        valid.extend(a.valid for a in answers)
    return UniformityResult(jsd, uniq, ent, float(np.mean(valid)))


def openset(policy: Policy, prompts: Sequence[PromptSpec], n_samples: int, decode: DecodeConfig,
            rng: np.random.Generator) -> list[tuple[list[int], int]]:
    """Unique@N curves over valid answers (invalid responses never add a new item)."""
    out = []
    for p in prompts:
        answers = [r.parsed for r in sample_batch(policy, p, decode, rng, n_samples)]
        seen: set[int] = set()
        curve = []
        for a in answers:
            if a.valid:
                seen.add(a.item)
            curve.append(len(seen))
        out.append((curve, curve[-1]))
    return out


def creative_tokens(policy: Policy, prompts: Sequence[PromptSpec], n_samples: int, decode: DecodeConfig,
                    rng: np.random.Generator) -> tuple[float, float, int]:
    """Self-BLEU over free generations; returns (self_bleu, diversity, unique texts)."""
    texts = []
    for p in prompts:
        texts.extend(r.tokens for r in sample_batch(policy, p, decode, rng, n_samples))
    sb, div = metrics.self_bleu(texts)
    return sb, div, metrics.unique_at_n([tuple(t) for t in texts])[1]


def report(policy: Policy, prompts: Sequence[PromptSpec], n_samples: int, decode: DecodeConfig,
           rng: np.random.Generator) -> metrics.MetricReport:
    """Compact report for trajectory logging, computed on list prompts."""
    u = uniformity(policy, prompts, n_samples, decode, rng)
    texts = [r.tokens for r in sample_batch(policy, prompts[0], decode, rng, min(n_samples, 50))]
    sb, div = metrics.self_bleu(texts)
    curve, final = metrics.unique_at_n(texts)
    return metrics.MetricReport(u.jsd, curve, final, sb, div, u.entropy, n_samples * len(prompts))
