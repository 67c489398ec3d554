"""Brute-force checks that sit beside the trainer.

Nothing here reuses the trainer's objective code: group rewards are taken in
expectation by enumerating every outcome tuple, gradients by central
differences, and the surrogate objective is re-derived from its definition.
"""

from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import trainer
from .policy import DecodeConfig, MLPPolicy, Policy, Rollout, TabularPolicy, apply_decode, forward_logits, \
    logprobs_under, sample_arrays, sample_batch, batch_grad
from .reward import Group, GroupRewardFunction, correctness_reward, frequency_reward, check_reward_contract
from .task_gen import (ANSWER_CLOSE, ANSWER_OPEN, EOS, Mode, ParsedAnswer, PromptSpec, ValidSet,
                       Vocabulary, parse_answer, valid_set)

DEFAULT_MAX_TUPLES = 10**6
INVALID_TOKENS = (EOS,)


class BudgetExceeded(ValueError):
    pass


def outcome_distribution(policy: Policy, prompt: PromptSpec, cfg: DecodeConfig | None = None) -> tuple[list[int], np.ndarray]:
    """Exact probabilities of each valid item, plus the INVALID remainder last.

    A valid response is exactly [OPEN, v, CLOSE] and sampling stops at CLOSE,
    so P(v) is the product of three step probabilities.
    """
    cfg = cfg or DecodeConfig(max_response_len=policy.max_response_len)
    items = sorted(valid_set(prompt, policy.vocab).valid_items)
    p_open = apply_decode(forward_logits(policy, prompt, []), cfg)[ANSWER_OPEN]
    p_item = apply_decode(forward_logits(policy, prompt, [ANSWER_OPEN]), cfg)
    probs = []
    for v in items:
        p_close = apply_decode(forward_logits(policy, prompt, [ANSWER_OPEN, v]), cfg)[ANSWER_CLOSE]
        probs.append(p_open * p_item[v] * p_close)
    probs = np.array(probs)
    return items, np.append(probs, max(1.0 - probs.sum(), 0.0))


def _outcome_rollout(item: int | None, valid: ValidSet) -> Rollout:
    toks = (ANSWER_OPEN, item, ANSWER_CLOSE) if item is not None else INVALID_TOKENS
    return Rollout(toks, np.zeros(len(toks)), parse_answer(toks, valid))


def exact_expected_group_reward(policy: Policy, prompt: PromptSpec, G: int, reward_fn: GroupRewardFunction,
                                max_tuples: int = DEFAULT_MAX_TUPLES) -> float:
    """Sum over all G-tuples of outcomes of P(tuple) * mean(reward_fn(tuple)).

    Valid for rewards that read only the parsed verdicts.
    """
    items, probs = outcome_distribution(policy, prompt)
    outcomes: list[int | None] = list(items) + [None]
    n = len(outcomes) ** G
    if n > max_tuples:
        raise BudgetExceeded(f"{len(outcomes)}^{G} = {n} tuples exceeds budget {max_tuples}")
    valid = valid_set(prompt, policy.vocab)
    rolls = [_outcome_rollout(o, valid) for o in outcomes]
    total = 0.0
    for combo in itertools.product(range(len(outcomes)), repeat=G):
        pr = float(np.prod(probs[list(combo)]))
        if pr == 0.0:
            continue
        r = reward_fn(Group(prompt, [rolls[k] for k in combo], valid))
        total += pr * float(np.mean(r))
    return total


def sample_group_outcomes(policy: Policy, prompt: PromptSpec, G: int, n_groups: int,
                          rng: np.random.Generator) -> np.ndarray:
    """Sample and parse ``n_groups`` groups; entry k < L is the k-th sorted valid item, L is INVALID."""
    cfg = DecodeConfig(max_response_len=policy.max_response_len)
    tokens, _, lengths = sample_arrays(policy, prompt, cfg, rng, n_groups * G)
    valid = valid_set(prompt, policy.vocab)
    items = sorted(valid.valid_items)
    code = {v: i for i, v in enumerate(items)}
    seqs, seq_id = np.unique(np.column_stack([tokens, lengths]), axis=0, return_inverse=True)
    seq_outcome = np.full(len(seqs), len(items))
    for j, row in enumerate(seqs):
        a = parse_answer(row[:row[-1]].tolist(), valid)
        if a.valid:
            seq_outcome[j] = code[a.item]
    return seq_outcome[seq_id.ravel()].reshape(n_groups, G)


def score_group_outcomes(policy: Policy, prompt: PromptSpec, outcomes: np.ndarray,
                         reward_fn: GroupRewardFunction) -> tuple[float, float]:
    """Mean group-averaged reward and its standard error; each distinct outcome tuple is scored once."""
    valid = valid_set(prompt, policy.vocab)
    rolls = [_outcome_rollout(v, valid) for v in sorted(valid.valid_items)] + [_outcome_rollout(None, valid)]
    groups, group_id = np.unique(outcomes, axis=0, return_inverse=True)
    scores = np.array([np.mean(reward_fn(Group(prompt, [rolls[i] for i in g], valid))) for g in groups])
    means = scores[group_id.ravel()]
    return float(means.mean()), float(means.std(ddof=1) / math.sqrt(len(means)))


def monte_carlo_group_reward(policy: Policy, prompt: PromptSpec, G: int, reward_fn: GroupRewardFunction,
                             n_groups: int, rng: np.random.Generator) -> tuple[float, float]:
    """Monte Carlo counterpart of ``exact_expected_group_reward``.

    Responses are sampled and parsed for real; scoring by parsed outcome
    makes the same assumption about the reward as the exact enumeration.
    """
    return score_group_outcomes(policy, prompt, sample_group_outcomes(policy, prompt, G, n_groups, rng), reward_fn)


def finite_diff_grad(objective: Callable[[Policy], float], policy: Policy, h: float = 1e-5,
                     keys: list[str] | None = None) -> dict[str, np.ndarray]:
    """Central differences of ``objective`` w.r.t. every trainable coordinate."""
    if h <= 0:
        raise ValueError("h must be positive")
    out = {}
    for k in keys or policy.trainable:
        a = policy.arrays[k]
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + h
            fp = objective(policy)
            a[idx] = old - h
            fm = objective(policy)
            a[idx] = old
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise ValueError(f"non-finite objective at {k}{idx}")
            g[idx] = (fp - fm) / (2 * h)
        out[k] = g
    return out


def max_relative_error(analytic: dict[str, np.ndarray], numeric: dict[str, np.ndarray],
                       floor: float = 1e-6, skip: dict[str, np.ndarray] | None = None) -> float:
    worst = 0.0
    for k, a in analytic.items():
        m = np.abs(a) > floor
        if skip is not None and k in skip:
            m &= ~skip[k]
        if m.any():
            worst = max(worst, float(np.max(np.abs(a[m] - numeric[k][m]) / np.abs(a[m]))))
    return worst


# -- independent surrogate --------------------------------------------------

def reference_advantages(rewards) -> np.ndarray:
    r = [float(x) for x in rewards]
    mean = math.fsum(r) / len(r)
    sd = math.sqrt(math.fsum((x - mean) ** 2 for x in r) / len(r))
    return np.zeros(len(r)) if sd < 1e-8 else np.array([(x - mean) / sd for x in r])


def reference_objective(policy: Policy, prompts, rollouts, rewards, old_lp, ref_lp, eps: float, beta: float) -> float:
    """J written token by token from its definition, batch-averaged over prompts."""
    total = 0.0
    for p, rolls, rw, olds, refs in zip(prompts, rollouts, rewards, old_lp, ref_lp):
        adv = reference_advantages(rw)
        G = len(rolls)
        clip_sum = kl_sum = 0.0
        for r, a, old, ref in zip(rolls, adv, olds, refs):
            new = logprobs_under(policy, p, r.tokens)
            c = k = 0.0
            for t in range(len(r.tokens)):
                rho = math.exp(new[t] - old[t])
                c += min(rho * a, min(max(rho, 1 - eps), 1 + eps) * a)
                d = ref[t] - new[t]
                k += math.exp(d) - d - 1
            clip_sum += c / len(r.tokens)
            kl_sum += k / len(r.tokens)
        total += clip_sum / G - beta * kl_sum / G
    return total / len(prompts)


def kink_mask(policy: Policy, batch: trainer.GroupBatch, eps: float, tol: float = 1e-3) -> bool:
    """True if any ratio sits within ``tol`` of a clip boundary."""
    for p, rolls, olds in zip(batch.prompts, batch.rollouts, batch.old_lp):
        for r, o in zip(rolls, olds):
            rho = np.exp(logprobs_under(policy, p, r.tokens) - o)
            if np.any(np.abs(rho - (1 - eps)) < tol) or np.any(np.abs(rho - (1 + eps)) < tol):
                return True
    return False


def micro_vocab() -> Vocabulary:
    return Vocabulary({"alpha": [f"a{i}" for i in range(12)], "beta": [f"b{i}" for i in range(12)]})


def random_micro_instance(rng: np.random.Generator, backend: str, G: int = 4, n_prompts: int = 2):
    """A small policy plus frozen rollout data, with the policy then perturbed so ratios move off 1."""
    vocab = micro_vocab()
    prompts = []
    for _ in range(n_prompts):
        cat = vocab.categories[rng.integers(2)]
        L = int(rng.integers(4, 7))
        items = tuple(int(i) for i in rng.choice(vocab.category_items[cat], L, replace=False))
        prompts.append(PromptSpec(int(rng.integers(4)), cat, items, Mode.LIST_SELECTION))
    if backend == "tabular":
        policy: Policy = TabularPolicy.init(vocab, prompts, 4)
        policy.arrays["table"][:] = rng.normal(0, 1.0, policy.arrays["table"].shape)
        policy.arrays["table"][:, 0, ANSWER_OPEN] += 3
        policy.arrays["table"][:, 2, ANSWER_CLOSE] += 3
    else:
        policy = MLPPolicy.init(vocab, rng, d_e=4, d_h=8, scale=0.5)
    cfg = DecodeConfig(max_response_len=4)
    rollouts = [sample_batch(policy, p, cfg, rng, G) for p in prompts]
    rewards = [rng.normal(size=G) for _ in prompts]
    old_lp = [[r.old_logprobs for r in rolls] for rolls in rollouts]
    ref = policy.copy()
    for k in policy.trainable:
        ref.arrays[k] = ref.arrays[k] + rng.normal(0, 0.3, ref.arrays[k].shape)
    ref_lp = [[logprobs_under(ref, p, r.tokens) for r in rolls] for p, rolls in zip(prompts, rollouts)]
    for k in policy.trainable:
        policy.arrays[k] += rng.normal(0, 0.15, policy.arrays[k].shape)
    batch = trainer.GroupBatch(prompts, rollouts, old_lp, ref_lp, [trainer.compute_advantages(r) for r in rewards])
    return policy, batch, rewards


def surrogate_gradient_check(rng: np.random.Generator, backend: str, eps: float = 0.2, beta: float = 0.04,
                             h: float = 1e-5) -> tuple[float, int]:
    """Max rel. error of the trainer's gradient vs finite differences of the reference objective.

    Returns (max_error, clipped_tokens); instances near a clip kink are redrawn.
    """
    for _ in range(50):
        policy, batch, rewards = random_micro_instance(rng, backend)
        if not kink_mask(policy, batch, eps):
            break
    else:
        raise RuntimeError("could not draw an instance away from clip kinks")
    analytic = trainer.surrogate_gradient(policy, batch, eps, beta)

    def J(pol):
        return reference_objective(pol, batch.prompts, batch.rollouts, rewards, batch.old_lp, batch.ref_lp, eps, beta)

    numeric = finite_diff_grad(J, policy, h)
    clipped = 0
    for p, rolls, olds, adv in zip(batch.prompts, batch.rollouts, batch.old_lp, batch.advantages):
        for r, o, a in zip(rolls, olds, adv):
            rho = np.exp(logprobs_under(policy, p, r.tokens) - o)
            clipped += int(np.sum(((a > 0) & (rho > 1 + eps)) | ((a < 0) & (rho < 1 - eps))))
    return max_relative_error(analytic, numeric), clipped


def policy_gradient_check(rng: np.random.Generator, backend: str, h: float = 1e-5) -> float:
    """grad_weighted_logprob vs finite differences of the weighted log-likelihood."""
    policy, batch, _ = random_micro_instance(rng, backend)
    seqs, owner = batch.flat()
    weights = [rng.normal(size=len(s)) for s in seqs]
    analytic = batch_grad(policy, batch.prompts, seqs, owner, weights)

    def f(pol):
        return sum(float(np.dot(w, logprobs_under(pol, batch.prompts[o], s))) for s, o, w in zip(seqs, owner, weights))

    return max_relative_error(analytic, finite_diff_grad(f, policy, h))


@dataclass
class FixedPointReport:
    passed: bool
    rewards_all_one: bool
    sigma: float
    advantages_zero: bool
    params_unchanged: bool
    update_norm: float


def stratified_group(L: int, G: int, perturb: bool = False) -> tuple[Policy, PromptSpec, list[Rollout]]:
    vocab = Vocabulary()
    cat = vocab.categories[0]
    prompt = PromptSpec(0, cat, vocab.category_items[cat][:L], Mode.LIST_SELECTION)
    valid = valid_set(prompt, vocab)
    answers = [prompt.items[i % L] for i in range(G)]
    if perturb:
        answers[0] = answers[1]
    rolls = [Rollout((ANSWER_OPEN, v, ANSWER_CLOSE), np.zeros(3), ParsedAnswer(v)) for v in answers]
    policy = MLPPolicy.init(vocab, np.random.default_rng(L * 1000 + G))
    for r in rolls:
        r.old_logprobs = logprobs_under(policy, prompt, r.tokens)
        assert r.parsed == parse_answer(r.tokens, valid)
    return policy, prompt, rolls


def uniform_fixed_point_check(L: int, G: int, perturb: bool = False) -> FixedPointReport:
    """Stratified group (G/L rollouts per valid item) must be an exact no-op of a train step at beta=0."""
    if G % L:
        raise ValueError("G must be a multiple of L")
    policy, prompt, rolls = stratified_group(L, G, perturb)
    valid = valid_set(prompt, policy.vocab)
    rewards = frequency_reward(Group(prompt, rolls, valid))
    sigma = float(np.std(rewards))
    adv = trainer.compute_advantages(rewards)
    cfg = trainer.TrainConfig(G=G, kl_beta=0.0, inner_epochs=2)
    state = trainer.TrainerState.start(policy, cfg)
    before = {k: v.copy() for k, v in policy.arrays.items()}
    batch = trainer.GroupBatch([prompt], [rolls], [[r.old_logprobs for r in rolls]],
                               [[r.old_logprobs for r in rolls]], [adv])
    trainer.optimize_batch(state, batch, [rewards], cfg)
    unchanged = all(np.array_equal(before[k], policy.arrays[k]) for k in before)
    delta = math.sqrt(sum(float(np.sum((before[k] - policy.arrays[k]) ** 2)) for k in before))
    ones = bool(np.all(rewards == 1.0))
    zero = bool(np.all(adv == 0.0))
    return FixedPointReport(ones and sigma == 0.0 and zero and unchanged, ones, sigma, zero, unchanged, delta)


# -- verify suite -----------------------------------------------------------

@dataclass
class CheckResult:
    check: str
    status: str
    max_error: float
    budget_used: float

    def to_json(self) -> dict:
        return asdict(self)


def _timed(name: str, fn: Callable[[], tuple[bool, float]]) -> CheckResult:
    t0 = time.perf_counter()
    try:
        ok, err = fn()
        status = "pass" if ok else "fail"
    except Exception as e:  # a crashing check is a failed check
        ok, err, status = False, float("nan"), f"error: {e}"
    return CheckResult(name, status, float(err), time.perf_counter() - t0)


def _check_formula():
    vocab = Vocabulary()
    cat = vocab.categories[0]
    items = vocab.category_items[cat][:4]
    prompt = PromptSpec(0, cat, items)
    valid = valid_set(prompt, vocab)
    seqs = [(ANSWER_OPEN, items[0], ANSWER_CLOSE)] * 2 + [(ANSWER_OPEN, items[1], ANSWER_CLOSE), (EOS,)]
    rolls = [Rollout(s, np.zeros(len(s)), parse_answer(s, valid)) for s in seqs]
    got = frequency_reward(Group(prompt, rolls, valid))
    err = float(np.max(np.abs(got - np.array([7 / 12, 7 / 12, 11 / 12, -1.0]))))
    return err <= 1e-12, err


def _check_enumeration(n_policies: int = 4, n_groups: int = 20000):
    rng = np.random.default_rng(11)
    worst = 0.0
    for i in range(n_policies):
        policy, batch, _ = random_micro_instance(rng, "tabular", n_prompts=1)
        prompt = batch.prompts[0]
        for fn in (frequency_reward, correctness_reward):
            G = 3
            exact = exact_expected_group_reward(policy, prompt, G, fn)
            mc, se = monte_carlo_group_reward(policy, prompt, G, fn, n_groups, rng)
            worst = max(worst, abs(mc - exact) / se if se > 0 else abs(mc - exact))
    return worst <= 4.0, worst


def run_verify_suite(seed: int = 0, fast: bool = True) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    checks = [
        ("frequency_reward_formula", _check_formula),
        ("advantage_normalization", lambda: _adv_check(rng)),
        ("kl_estimator", _kl_check),
        ("jsd_point_mass", _jsd_check),
        ("policy_grad_tabular", lambda: (lambda e: (e <= 1e-4, e))(policy_gradient_check(rng, "tabular"))),
        ("policy_grad_mlp", lambda: (lambda e: (e <= 1e-4, e))(policy_gradient_check(rng, "mlp"))),
        ("surrogate_grad", lambda: _surrogate_suite(rng, 3 if fast else 20)),
        ("enumeration_vs_monte_carlo", _check_enumeration),
        ("uniform_fixed_point", _fixed_point_suite),
        ("reward_contract_frequency", lambda: _contract(frequency_reward)),
        ("reward_contract_correctness", lambda: _contract(correctness_reward)),
    ]
    return [_timed(name, fn) for name, fn in checks]


def _adv_check(rng):
    worst = 0.0
    for _ in range(100):
        r = rng.normal(size=int(rng.integers(2, 33))) * rng.exponential() + rng.normal()
        a = trainer.compute_advantages(r)
        worst = max(worst, float(np.max(np.abs(a - reference_advantages(r)))))
    return worst <= 1e-9, worst


def _kl_check():
    err = abs(float(trainer.kl_terms([0.0], [math.log(2)])[0]) - (1 - math.log(2)))
    return err <= 1e-9, err


def _jsd_check():
    from .metrics import jsd_to_uniform
    p = np.zeros(9)
    p[0] = 1.0
    # closed form for a point mass against uniform over 8: 1 - (9/16) log2 9 + ... evaluated directly
    m = (p + np.append(np.full(8, 1 / 8), 0)) / 2
    direct = 0.5 * math.log2(1 / m[0]) + 0.5 * sum((1 / 8) * math.log2((1 / 8) / m[i]) for i in range(8))
    err = abs(jsd_to_uniform(p, 8) - direct)
    return err <= 1e-12 and abs(direct - 0.71693) < 1e-4, err


def _surrogate_suite(rng, n):
    worst, clipped = 0.0, 0
    for i in range(n):
        e, c = surrogate_gradient_check(rng, "mlp" if i % 2 else "tabular")
        worst, clipped = max(worst, e), clipped + c
    return worst <= 1e-4 and clipped > 0, worst


def _fixed_point_suite():
    ok = uniform_fixed_point_check(4, 8).passed and uniform_fixed_point_check(8, 32).passed
    pert = uniform_fixed_point_check(4, 8, perturb=True)
    return ok and pert.sigma > 0 and pert.update_norm > 0, 0.0


def _contract(fn):
    rep = check_reward_contract(fn, 200, 5)
    return rep.ok, float(len(rep.violations))


def report_json(results: list[CheckResult]) -> str:
    return json.dumps([r.to_json() for r in results], indent=2)
