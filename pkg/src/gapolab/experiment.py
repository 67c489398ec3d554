"""Wiring from an ExperimentConfig to datasets, base policy, training runs and evaluations.

All randomness derives from ``cfg.seed`` through named streams, so the same
config always produces the same prompts, base policy and trajectories.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import evaluate, metrics, trainer
from .config import ExperimentConfig
from .policy import DecodeConfig, MLPPolicy, Policy, TabularPolicy
from .reward import correctness_reward, frequency_reward
from .task_gen import DatasetConfig, PromptSpec, Vocabulary, generate_dataset, split_held_out
from .trainer import stream


def _int_seed(seed: int, name: str) -> int:
    return int(stream(seed, name).integers(2**31))


@dataclass
class Setup:
    vocab: Vocabulary
    train_categories: list[str]
    heldout_categories: list[str]
    train_prompts: list[PromptSpec]
    eval_prompts: list[PromptSpec]
    open_prompts: list[PromptSpec]


def build_setup(cfg: ExperimentConfig) -> Setup:
    vocab = Vocabulary()
    cats = cfg.dataset.categories or vocab.categories
    train_c, held_c = split_held_out(cats, _int_seed(cfg.seed, "split"), cfg.dataset.heldout_ratio)
    d = cfg.dataset
    train = generate_dataset(DatasetConfig(train_c, d.count, d.min_len, d.max_len, d.open_fraction),
                             _int_seed(cfg.seed, "dataset"), vocab)
    ev = generate_dataset(DatasetConfig(held_c, cfg.eval.list_prompts, d.min_len, d.max_len, 0.0),
                          _int_seed(cfg.seed, "eval_prompts"), vocab)
    op = generate_dataset(DatasetConfig(held_c, cfg.eval.open_prompts, d.min_len, d.max_len, 1.0),
                          _int_seed(cfg.seed, "open_prompts"), vocab)
    return Setup(vocab, train_c, held_c, train, ev, op)


def init_policy(cfg: ExperimentConfig, setup: Setup) -> Policy:
    if cfg.policy.backend == "tabular":
        return TabularPolicy.init(setup.vocab, setup.train_prompts + setup.eval_prompts + setup.open_prompts,
                                  cfg.train.max_response_len)
    return MLPPolicy.init(setup.vocab, stream(cfg.seed, "init"), cfg.policy.d_e, cfg.policy.d_h,
                          cfg.train.max_response_len, cfg.policy.init_scale)


def base_policy(cfg: ExperimentConfig, setup: Setup) -> Policy:
    """The shared starting point of every method: format-following, position-biased."""
    policy = init_policy(cfg, setup)
    b = cfg.base
    list_prompts = [p for p in setup.train_prompts if p.items]
    return trainer.pretrain_base(policy, list_prompts, b.steps, b.position_decay, b.learning_rate,
                                 b.batch_size, cfg.seed)


def reward_fn(name: str):
    return {"FREQUENCY": frequency_reward, "CORRECTNESS": correctness_reward}.get(name)


def train_config_for(cfg: ExperimentConfig, method: str) -> trainer.TrainConfig:
    tc = dataclasses.replace(cfg.train, seed=cfg.seed)
    if method == "SFT":
        tc = dataclasses.replace(tc, learning_rate=cfg.sft_learning_rate, lr_schedule="constant")
    return tc


def eval_report(cfg: ExperimentConfig, setup: Setup, policy: Policy, step: int,
                decode: DecodeConfig | None = None) -> metrics.MetricReport:
    """Trajectory-row metrics: held-out list JSD/entropy, open-set Unique@N, Self-BLEU."""
    decode = decode or DecodeConfig(max_response_len=cfg.train.max_response_len)
    rng = stream(cfg.seed, "eval", step)
    u = evaluate.uniformity(policy, setup.eval_prompts, cfg.eval.list_samples, decode, rng)
    open_runs = evaluate.openset(policy, setup.open_prompts, cfg.eval.open_samples, decode, rng)
    curve = np.mean([c for c, _ in open_runs], axis=0)
    texts = []
    for p in setup.open_prompts:
        texts.extend(r.tokens for r in evaluate.sample_batch(policy, p, decode, rng, cfg.eval.creative_samples))
    sb, div = metrics.self_bleu(texts)
    return metrics.MetricReport(u.jsd, [float(x) for x in curve], float(curve[-1]), sb, div, u.entropy,
                                cfg.eval.list_samples * len(setup.eval_prompts))


def run_method(cfg: ExperimentConfig, setup: Setup, start: Policy, method: str,
               evaluate_every: int | None = None,
               on_step: Callable[[dict], None] | None = None,
               checkpoint: Callable[[int, Policy], None] | None = None,
               trace=None) -> trainer.LoopResult:
    """Train a copy of ``start`` with FREQUENCY (GAPO), CORRECTNESS (GRPO) or SFT."""
    policy = start.copy()
    every = cfg.eval.every if evaluate_every is None else evaluate_every
    tc = train_config_for(cfg, method)
    return trainer.train_loop(
        policy, tc, [p for p in setup.train_prompts if method != "SFT" or p.items], reward_fn(method),
        sft=method == "SFT",
        eval_every=every or tc.total_steps,
        evaluate=lambda s, q: eval_report(cfg, setup, q, s),
        on_step=on_step, checkpoint_every=cfg.checkpoint_every, checkpoint=checkpoint, trace=trace)


COMPARE_ROWS = (
    ("base", None, None),
    ("base+min_p(0.05)", None, 0.05),
    ("base+min_p(0.1)", None, 0.1),
    ("sft", "SFT", None),
    ("gapo", "FREQUENCY", None),
)


def held_out_row(cfg: ExperimentConfig, setup: Setup, policy: Policy, min_p: float | None = None) -> dict:
    """Held-out list JSD and open-prompt Unique@N under one decoding rule, on the shared compare stream."""
    decode = DecodeConfig(min_p=min_p, max_response_len=cfg.train.max_response_len)
    rng = stream(cfg.seed, "compare")
    u = evaluate.uniformity(policy, setup.eval_prompts, cfg.eval.list_samples, decode, rng)
    runs = evaluate.openset(policy, setup.open_prompts, cfg.eval.open_samples, decode, rng)
    return {"js": u.jsd, "unique_at_n": float(np.mean([f for _, f in runs])), "valid_fraction": u.valid_fraction}


def compare(cfg: ExperimentConfig) -> list[dict]:
    """Evaluate the five methods on the same held-out prompts and eval streams."""
    setup = build_setup(cfg)
    base = base_policy(cfg, setup)
    trained: dict[str, Policy] = {}
    rows = []
    for name, method, min_p in COMPARE_ROWS:
        if method is None:
            policy = base
        else:
            if method not in trained:
                trained[method] = run_method(cfg, setup, base, method, evaluate_every=0).policy
            policy = trained[method]
        rows.append({"method": name, **held_out_row(cfg, setup, policy, min_p)})
    return rows
