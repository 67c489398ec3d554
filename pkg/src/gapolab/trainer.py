"""GRPO / GAPO optimization loop and the teacher-forcing SFT baseline.

The objective ascended at every inner epoch is

    J = L_clip - beta * KL

with L_clip the group-normalized clipped surrogate, averaged per rollout over
its tokens, per group over its rollouts, and over the prompts of a batch.
Whether this is GRPO or GAPO is decided purely by the group reward function
handed to :func:`train_step`.
"""

from __future__ import annotations

import math
import logging
import time
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .policy import (DecodeConfig, Policy, Rollout, batch_grad, batch_logprobs, sample_batch)
from .reward import Group, GroupRewardFunction
from .task_gen import ANSWER_CLOSE, ANSWER_OPEN, Mode, PromptSpec, valid_set

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-8


class TrainingError(RuntimeError):
    """Non-finite loss, ratio or gradient."""


LR_SCHEDULES = ("constant", "linear", "cosine")


def lr_at(cfg: "TrainConfig", step: int) -> float:
    frac = step / max(cfg.total_steps, 1)
    if cfg.lr_schedule == "linear":
        return cfg.learning_rate * (1.0 - frac)
    if cfg.lr_schedule == "cosine":
        return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * frac))
    return cfg.learning_rate


@dataclass
class TrainConfig:
    G: int = 32
    clip_epsilon: float = 0.2
    kl_beta: float = 0.0
    learning_rate: float = 1.0
    batch_size: int = 8
    inner_epochs: int = 1
    total_steps: int = 2000
    optimizer: str = "sgd"
    lr_schedule: str = "linear"  # constant | linear | cosine, decaying to 0 at total_steps
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    temperature: float = 1.0
    max_response_len: int = 4
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            ("G", self.G >= 2, "must be >= 2"),
            ("clip_epsilon", self.clip_epsilon > 0, "must be > 0"),
            ("kl_beta", self.kl_beta >= 0, "must be >= 0"),
            ("learning_rate", self.learning_rate > 0, "must be > 0"),
            ("batch_size", self.batch_size >= 1, "must be >= 1"),
            ("inner_epochs", self.inner_epochs >= 1, "must be >= 1"),
            ("total_steps", self.total_steps >= 0, "must be >= 0"),
            ("optimizer", self.optimizer in ("adam", "sgd"), "must be 'adam' or 'sgd'"),
            ("lr_schedule", self.lr_schedule in LR_SCHEDULES, f"must be one of {LR_SCHEDULES}"),
            ("temperature", self.temperature > 0, "must be > 0"),
            ("max_response_len", self.max_response_len >= 3, "must be >= 3 to fit the answer tags"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ValueError(f"{name} {msg} (got {getattr(self, name)!r})")

    @property
    def decode(self) -> DecodeConfig:
        return DecodeConfig(temperature=self.temperature, max_response_len=self.max_response_len)


def stream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Named child RNG stream of a root seed."""
    ss = np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),) + tuple(index))
    return np.random.default_rng(ss)


# -- objective pieces -------------------------------------------------------

def compute_advantages(rewards: Sequence[float]) -> np.ndarray:
    """Per-rollout advantages (r - mean) / population std; all zero if std < 1e-8."""
    r = np.asarray(rewards, dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise TrainingError(f"non-finite rewards {r.tolist()}")
    sigma = r.std()
    if sigma < SIGMA_FLOOR:
        return np.zeros_like(r)
    return (r - r.mean()) / sigma


def broadcast_advantages(adv: np.ndarray, lengths: Sequence[int]) -> list[np.ndarray]:
    return [np.full(n, a) for a, n in zip(adv, lengths)]


def importance_ratios(new_logprobs, old_logprobs) -> np.ndarray:
    new, old = np.asarray(new_logprobs, dtype=float), np.asarray(old_logprobs, dtype=float)
    if new.shape != old.shape:
        raise ValueError(f"shape mismatch {new.shape} vs {old.shape}")
    rho = np.exp(new - old)
    if not np.all(np.isfinite(rho)):
        raise TrainingError("non-finite importance ratio")
    return rho


def clipped_surrogate(ratios: Sequence[np.ndarray], advantages: Sequence[np.ndarray], eps: float) -> float:
    total = 0.0
    for rho, adv in zip(ratios, advantages):
        rho, adv = np.asarray(rho, dtype=float), np.asarray(adv, dtype=float)
        term = np.minimum(rho * adv, np.clip(rho, 1 - eps, 1 + eps) * adv)
        total += term.mean()
    return total / len(ratios)


def kl_terms(current_logprobs, ref_logprobs) -> np.ndarray:
    """Per-token exp(d) - d - 1 with d = ref - current; nonnegative."""
    d = np.asarray(ref_logprobs, dtype=float) - np.asarray(current_logprobs, dtype=float)
    return np.maximum(np.expm1(d) - d, 0.0)


def kl_penalty(current_logprobs: Sequence[np.ndarray], ref_logprobs: Sequence[np.ndarray]) -> float:
    return sum(kl_terms(c, r).mean() for c, r in zip(current_logprobs, ref_logprobs)) / len(current_logprobs)


@dataclass
class GroupBatch:
    """Frozen rollout data for a batch of prompts: what the inner epochs optimize."""

    prompts: list[PromptSpec]
    rollouts: list[list[Rollout]]
    old_lp: list[list[np.ndarray]]
    ref_lp: list[list[np.ndarray]]
    advantages: list[np.ndarray]  # one scalar per rollout, per prompt

    def flat(self):
        seqs, owner = [], []
        for k, rolls in enumerate(self.rollouts):
            seqs.extend(r.tokens for r in rolls)
            owner.extend([k] * len(rolls))
        return seqs, owner

    def split(self, flat_list):
        out, k = [], 0
        for rolls in self.rollouts:
            out.append(flat_list[k:k + len(rolls)])
            k += len(rolls)
        return out

    def token_arrays(self):
        """Flat per-token (old, ref, advantage, weight) with weight = 1/(B G |o_i|)."""
        B = len(self.prompts)
        old, ref, adv, coef = [], [], [], []
        for rolls, olds, refs, a in zip(self.rollouts, self.old_lp, self.ref_lp, self.advantages):
            G = len(rolls)
            for r, o, rf, ai in zip(rolls, olds, refs, a):
                n = len(r.tokens)
                old.append(o)
                ref.append(rf)
                adv.append(np.full(n, ai))
                coef.append(np.full(n, 1.0 / (B * G * n)))
        return tuple(np.concatenate(x) for x in (old, ref, adv, coef))


def _objective_terms(new, old, ref, adv, coef, eps, beta):
    rho = np.exp(new - old)
    if not np.all(np.isfinite(rho)):
        raise TrainingError("non-finite importance ratio")
    surr = np.minimum(rho * adv, np.clip(rho, 1 - eps, 1 + eps) * adv)
    d = ref - new
    k = np.maximum(np.expm1(d) - d, 0.0)
    l_clip = float(np.dot(coef, surr))
    kl = float(np.dot(coef, k))
    # where the min takes the clipped branch outside [1-eps, 1+eps] the slope is zero
    clipped = ((adv > 0) & (rho > 1 + eps)) | ((adv < 0) & (rho < 1 - eps))
    w = coef * (np.where(clipped, 0.0, rho * adv) + beta * np.expm1(d))
    return l_clip - beta * kl, l_clip, kl, w


def surrogate_objective(policy: Policy, batch: GroupBatch, eps: float, beta: float) -> tuple[float, float, float]:
    """(J, L_clip, KL), each averaged over the prompts of the batch."""
    seqs, owner = batch.flat()
    new = np.concatenate(batch_logprobs(policy, batch.prompts, seqs, owner))
    J, l_clip, kl, _ = _objective_terms(new, *batch.token_arrays(), eps, beta)
    return J, l_clip, kl


def surrogate_value_and_grad(policy: Policy, batch: GroupBatch, eps: float, beta: float):
    """One forward/backward pass: ((J, L_clip, KL), gradient of J)."""
    seqs, owner = batch.flat()
    arrays = batch.token_arrays()
    values = []

    def weights(new):
        J, l_clip, kl, w = _objective_terms(new, *arrays, eps, beta)
        values.append((J, l_clip, kl))
        return w

    grad = batch_grad(policy, batch.prompts, seqs, owner, weights)
    return values[0], grad


def surrogate_gradient(policy: Policy, batch: GroupBatch, eps: float, beta: float) -> dict[str, np.ndarray]:
    return surrogate_value_and_grad(policy, batch, eps, beta)[1]


# -- optimizer --------------------------------------------------------------

class Optimizer:
    """Gradient *ascent* with SGD or Adam; skips updates whose gradient is exactly zero."""

    def __init__(self, kind: str, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.kind, self.lr, self.beta1, self.beta2, self.eps = kind, lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, policy: Policy, grad: dict[str, np.ndarray]) -> bool:
        if all(not np.any(g) for g in grad.values()):
            return False
        self.t += 1
        for k, g in grad.items():
            if self.kind == "sgd":
                policy.arrays[k] += self.lr * g
                continue
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1 ** self.t)
            vhat = v / (1 - self.beta2 ** self.t)
            policy.arrays[k] += self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return True


def grad_norm(grad: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grad.values())))


def _check_finite(grad: dict[str, np.ndarray], what: str) -> None:
    for k, g in grad.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {k} during {what}")


@dataclass
class TrainerState:
    policy: Policy
    ref: Policy
    optimizer: Optimizer
    step: int = 0
    old: Policy | None = None

    @classmethod
    def start(cls, policy: Policy, cfg: TrainConfig) -> "TrainerState":
        opt = Optimizer(cfg.optimizer, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        return cls(policy, policy.copy(), opt)


# -- steps ------------------------------------------------------------------

def collect_groups(state: TrainerState, prompts: Sequence[PromptSpec], reward_fn: GroupRewardFunction,
                   cfg: TrainConfig, rng: np.random.Generator, reward_rng: np.random.Generator | None = None,
                   trace: Callable[[Group, np.ndarray], None] | None = None) -> tuple[GroupBatch, list[np.ndarray]]:
    """Snapshot the old policy, sample G rollouts per prompt, score and normalize."""
    state.old = state.policy.copy()
    rollouts, rewards = [], []
    for p in prompts:
        rolls = sample_batch(state.old, p, cfg.decode, rng, cfg.G)
        group = Group(p, rolls, valid_set(p, state.old.vocab))
        r = np.asarray(reward_fn(group, reward_rng), dtype=float)
        if r.shape != (cfg.G,) or not np.all(np.isfinite(r)):
            raise TrainingError(f"reward function returned {r!r}")
        if trace is not None:
            trace(group, r)
        rollouts.append(rolls)
        rewards.append(r)
    batch = GroupBatch(list(prompts), rollouts, [], [], [compute_advantages(r) for r in rewards])
    seqs, owner = batch.flat()
    # ratios are taken against the raw old policy, not the decoding distribution
    if cfg.decode.untruncated:
        batch.old_lp = [[r.old_logprobs for r in rolls] for rolls in rollouts]
    else:
        batch.old_lp = batch.split(batch_logprobs(state.old, batch.prompts, seqs, owner))
    batch.ref_lp = batch.split(batch_logprobs(state.ref, batch.prompts, seqs, owner))
    return batch, rewards


def train_step(state: TrainerState, prompts: Sequence[PromptSpec], reward_fn: GroupRewardFunction,
               cfg: TrainConfig, rng: np.random.Generator | None = None,
               reward_rng: np.random.Generator | None = None, trace=None) -> dict:
    t0 = time.perf_counter()
    rng = rng if rng is not None else stream(cfg.seed, "rollouts", state.step)
    batch, rewards = collect_groups(state, prompts, reward_fn, cfg, rng, reward_rng, trace)
    return optimize_batch(state, batch, rewards, cfg, t0)


def optimize_batch(state: TrainerState, batch: GroupBatch, rewards: list[np.ndarray], cfg: TrainConfig,
                   t0: float | None = None) -> dict:
    t0 = time.perf_counter() if t0 is None else t0
    gnorm = 0.0
    for _ in range(cfg.inner_epochs):
        (J, l_clip, kl), grad = surrogate_value_and_grad(state.policy, batch, cfg.clip_epsilon, cfg.kl_beta)
        if not np.isfinite(J):
            raise TrainingError(f"non-finite objective at step {state.step}")
        _check_finite(grad, f"step {state.step}")
        gnorm = grad_norm(grad)
        state.optimizer.step(state.policy, grad)
    valid = [r.parsed.valid for rolls in batch.rollouts for r in rolls]
    entry = {
        "step": state.step,
        "mean_reward": float(np.mean(np.concatenate(rewards))),
        "valid_fraction": float(np.mean(valid)),
        "l_clip": float(l_clip),
        "kl": float(kl),
        "grad_norm": gnorm,
        "wall_ms": (time.perf_counter() - t0) * 1e3,
    }
    state.step += 1
    return entry


def answer_target(item: int) -> tuple[int, int, int]:
    return (ANSWER_OPEN, item, ANSWER_CLOSE)


def weighted_nll_step(state: TrainerState, prompts: Sequence[PromptSpec],
                      item_weights: Callable[[PromptSpec], Sequence[tuple[int, float]]]) -> dict:
    """One descent step on sum_prompt sum_(v, w) w * mean-token NLL([OPEN, v, CLOSE])."""
    seqs, owner, weights = [], [], []
    for k, p in enumerate(prompts):
        for v, w in item_weights(p):
            seqs.append(answer_target(v))
            owner.append(k)
            weights.append(np.full(3, w / 3.0))
    lps = batch_logprobs(state.policy, prompts, seqs, owner)
    loss = -sum(float(np.dot(w, lp)) for w, lp in zip(weights, lps))
    grad = batch_grad(state.policy, prompts, seqs, owner, weights)
    _check_finite(grad, "teacher forcing")
    state.optimizer.step(state.policy, grad)
    state.step += 1
    return {"step": state.step - 1, "loss": loss, "grad_norm": grad_norm(grad)}


def sft_loss(policy: Policy, prompts: Sequence[PromptSpec]) -> float:
    """Sum over prompts and valid items of the mean per-token NLL of [OPEN, v, CLOSE]."""
    seqs, owner = [], []
    for k, p in enumerate(prompts):
        for v in sorted(valid_set(p, policy.vocab).valid_items):
            seqs.append(answer_target(v))
            owner.append(k)
    return -sum(float(lp.mean()) for lp in batch_logprobs(policy, prompts, seqs, owner))


def sft_teacher_forcing_step(state: TrainerState, prompts: Sequence[PromptSpec], cfg: TrainConfig | None = None) -> dict:
    for p in prompts:
        if p.mode is not Mode.LIST_SELECTION:
            raise ValueError("teacher forcing needs list-selection prompts")
    return weighted_nll_step(state, prompts, lambda p: [(v, 1.0) for v in p.items])


def positional_bias(L: int, decay: float) -> np.ndarray:
    w = decay ** np.arange(L, dtype=float)
    return w / w.sum()


def pretrain_base(policy: Policy, prompts: Sequence[PromptSpec], steps: int, decay: float, lr: float,
                  batch_size: int, seed: int) -> Policy:
    """Fit a format-following but positionally biased starting policy.

    Item at list position j is targeted with weight proportional to decay**j,
    which mimics the skewed preferences of an instruction-tuned model.
    """
    state = TrainerState(policy, policy, Optimizer("adam", lr))
    rng = stream(seed, "base")
    for _ in range(steps):
        idx = rng.choice(len(prompts), size=min(batch_size, len(prompts)), replace=False)
        batch = [prompts[i] for i in idx]
        weighted_nll_step(state, batch, lambda p: list(zip(p.items, positional_bias(len(p.items), decay))))
    return policy


@dataclass
class LoopResult:
    policy: Policy
    step_log: list[dict] = field(default_factory=list)
    trajectory: list[tuple[int, object]] = field(default_factory=list)


def train_loop(policy: Policy, cfg: TrainConfig, dataset: Sequence[PromptSpec],
               reward_fn: GroupRewardFunction | None, *, sft: bool = False,
               eval_every: int = 0, evaluate: Callable[[int, Policy], object] | None = None,
               on_step: Callable[[dict], None] | None = None,
               checkpoint_every: int = 0, checkpoint: Callable[[int, Policy], None] | None = None,
               trace=None) -> LoopResult:
    """Run ``cfg.total_steps`` GRPO/GAPO steps (or SFT steps when ``sft``)."""
    if not dataset:
        raise ValueError("empty dataset")
    state = TrainerState.start(policy, cfg)
    result = LoopResult(policy)
    data_rng = stream(cfg.seed, "batches")
    reward_rng = stream(cfg.seed, "reward")
    for step in range(cfg.total_steps):
        idx = data_rng.choice(len(dataset), size=min(cfg.batch_size, len(dataset)), replace=False)
        prompts = [dataset[i] for i in idx]
        state.optimizer.lr = lr_at(cfg, step)
        if sft:
            entry = sft_teacher_forcing_step(state, prompts, cfg)
        else:
            entry = train_step(state, prompts, reward_fn, cfg, stream(cfg.seed, "rollouts", step), reward_rng, trace)
        result.step_log.append(entry)
        if on_step:
            on_step(entry)
        done = step + 1
        if evaluate and eval_every and (done % eval_every == 0 or done == cfg.total_steps):
            result.trajectory.append((done, evaluate(done, state.policy)))
        if checkpoint and checkpoint_every and done % checkpoint_every == 0:
            checkpoint(done, state.policy)
    return result
