"""Uniformity and diversity metrics: JSD to uniform, Unique@N, Self-BLEU, entropy."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Hashable, Sequence

import numpy as np

from .task_gen import ParsedAnswer, ValidSet

BLEU_EPSILON = 1e-9


@dataclass(frozen=True)
class EmpiricalDistribution:
    """Masses over the sorted valid items, then one trailing INVALID bucket."""

    items: tuple[int, ...]
    probs: np.ndarray
    n_samples: int

    @property
    def invalid(self) -> float:
        return float(self.probs[-1])

    @property
    def L(self) -> int:
        return len(self.items)

    def mass(self, item: int) -> float:
        return float(self.probs[self.items.index(item)])


def uniform_target(L: int) -> np.ndarray:
    return np.append(np.full(L, 1.0 / L), 0.0)


def empirical_distribution(answers: Sequence[ParsedAnswer], valid: ValidSet) -> EmpiricalDistribution:
    if not answers:
        raise ValueError("need at least one answer")
    items = tuple(sorted(valid.valid_items))
    pos = {v: i for i, v in enumerate(items)}
    counts = np.zeros(len(items) + 1)
    for a in answers:
        counts[pos[a.item] if a.valid else -1] += 1
    return EmpiricalDistribution(items, counts / len(answers), len(answers))


def _kl2(p: np.ndarray, q: np.ndarray) -> float:
    m = p > 0
    return float(np.sum(p[m] * np.log2(p[m] / q[m])))


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Base-2 Jensen-Shannon divergence between two probability vectors."""
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    m = 0.5 * (p + q)
    return min(max(0.5 * _kl2(p, m) + 0.5 * _kl2(q, m), 0.0), 1.0)


def jsd_to_uniform(dist: EmpiricalDistribution | np.ndarray, L: int | None = None) -> float:
    probs = dist.probs if isinstance(dist, EmpiricalDistribution) else np.asarray(dist, dtype=float)
    L = len(probs) - 1 if L is None else L
    if len(probs) != L + 1:
        raise ValueError(f"distribution has {len(probs)} entries, expected L + 1 = {L + 1}")
    return js_divergence(probs, uniform_target(L))


def entropy(dist: EmpiricalDistribution | np.ndarray) -> float:
    probs = dist.probs if isinstance(dist, EmpiricalDistribution) else np.asarray(dist, dtype=float)
    p = probs[probs > 0]
    return float(-np.sum(p * np.log2(p))) + 0.0


def unique_at_n(samples: Sequence[Hashable]) -> tuple[list[int], int]:
    if not samples:
        raise ValueError("need at least one sample")
    seen: set = set()
    curve = []
    for s in samples:
        seen.add(s)
        curve.append(len(seen))
    return curve, curve[-1]


def normalize_text(tokens: Sequence) -> tuple:
    """Key used for free-text uniqueness: case-folded, whitespace-stripped tokens."""
    return tuple(str(t).strip().casefold() for t in tokens if str(t).strip())


def _ngrams(seq: Sequence, n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu(hypothesis: Sequence, references: Sequence[Sequence], max_n: int = 4) -> float:
    """Sentence BLEU with uniform weights, clipped counts and add-epsilon smoothing.

    Orders for which the hypothesis has no n-grams are left out of the
    geometric mean, so a text of length < max_n scored against itself is 1.
    """
    hyp = list(hypothesis)
    if not hyp:
        return 0.0
    log_prec = []
    for n in range(1, max_n + 1):
        h = _ngrams(hyp, n)
        total = sum(h.values())
        if total == 0:
            continue
        max_ref: Counter = Counter()
        for ref in references:
            for g, c in _ngrams(list(ref), n).items():
                max_ref[g] = max(max_ref[g], c)
        matched = sum(min(c, max_ref[g]) for g, c in h.items())
        log_prec.append(math.log((matched or BLEU_EPSILON) / total))
    ref_lens = [len(r) for r in references]
    closest = min(ref_lens, key=lambda r: (abs(r - len(hyp)), r))
    bp = 1.0 if len(hyp) > closest else math.exp(1 - closest / len(hyp))
    return bp * math.exp(sum(log_prec) / len(log_prec))


def self_bleu(texts: Sequence[Sequence], max_n: int = 4) -> tuple[float, float]:
    """Mean BLEU of each text against all others; returns (self_bleu, 1 - self_bleu)."""
    if len(texts) < 2:
        raise ValueError("self-BLEU needs at least 2 texts")
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    scores = [bleu(t, [r for j, r in enumerate(texts) if j != i], max_n) for i, t in enumerate(texts)]
    # math.fsum keeps the mean independent of input order
    sb = math.fsum(scores) / len(scores)
    return sb, 1.0 - sb


@dataclass
class MetricReport:
    jsd: float
    unique_curve: list[int]
    unique_final: int
    self_bleu: float
    diversity: float
    entropy: float
    n_samples: int

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    CSV_HEADER = "step,jsd,unique_at_n,self_bleu,entropy"

    def csv_row(self, step: int) -> str:
        return f"{step},{self.jsd!r},{self.unique_final},{self.self_bleu!r},{self.entropy!r}"
