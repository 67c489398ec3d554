"""Toy autoregressive categorical policies.

Two backends share one row-oriented interface:

* ``TabularPolicy`` keeps a logit table indexed by (prompt hash, step, token).
* ``MLPPolicy`` encodes the prompt (list items + position offsets, template,
  generated prefix, step) through one tanh hidden layer. Output logits are a
  vocabulary projection plus a positional copy head that adds a score to
  each list item's token; the copy head is what lets a trained policy pick
  items from categories it never saw.

Gradients are written out by hand and checked against finite differences in
the test suite.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .task_gen import (ANSWER_CLOSE, EOS, MAX_LIST_LEN, TEMPLATES, Mode, ParsedAnswer,
                       PromptSpec, Vocabulary, parse_answer, render_prompt, valid_set)

FORMAT_VERSION = 1
_MAGIC = b"GAPOCKPT"


class PolicyError(ValueError):
    pass


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class DecodeConfig:
    temperature: float = 1.0
    top_k: int | None = None
    top_p: float | None = None
    min_p: float | None = None
    max_response_len: int = 4

    def __post_init__(self):
        if not self.temperature > 0:
            raise PolicyError(f"temperature must be positive, got {self.temperature}")
        active = [n for n in ("top_k", "top_p", "min_p") if getattr(self, n) is not None]
        if len(active) > 1:
            raise PolicyError(f"at most one truncation rule may be active, got {active}")
        if self.top_k is not None and self.top_k < 1:
            raise PolicyError("top_k must be a positive integer")
        if self.top_p is not None and not 0 < self.top_p <= 1:
            raise PolicyError("top_p must lie in (0, 1]")
        if self.min_p is not None and not 0 < self.min_p < 1:
            raise PolicyError("min_p must lie in (0, 1)")
        if self.max_response_len < 1:
            raise PolicyError("max_response_len must be positive")

    @property
    def untruncated(self) -> bool:
        return self.temperature == 1.0 and self.top_k is None and self.top_p is None and self.min_p is None


def apply_decode(logits: np.ndarray, cfg: DecodeConfig) -> np.ndarray:
    """Turn logits (last axis = vocabulary) into sampling probabilities."""
    if not cfg.temperature > 0:
        raise PolicyError("temperature must be positive")
    z = np.asarray(logits, dtype=np.float64)
    p = softmax(z / cfg.temperature)
    if cfg.top_k is None and cfg.top_p is None and cfg.min_p is None:
        return p

    if cfg.min_p is not None:
        keep = p >= cfg.min_p * p.max(axis=-1, keepdims=True)
    else:
        # stable sort on -p: ties go to the lower token id
        order = np.argsort(-p, axis=-1, kind="stable")
        ranked = np.take_along_axis(p, order, axis=-1)
        if cfg.top_k is not None:
            n_keep = np.full(p.shape[:-1] + (1,), min(cfg.top_k, p.shape[-1]))
        else:
            cum = np.cumsum(ranked, axis=-1)
            n_keep = np.minimum((cum < cfg.top_p).sum(axis=-1, keepdims=True) + 1, p.shape[-1])
        keep_ranked = np.arange(p.shape[-1]) < n_keep
        keep = np.zeros_like(keep_ranked)
        np.put_along_axis(keep, order, keep_ranked, axis=-1)
    q = np.where(keep, p, 0.0)
    return q / q.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class Context:
    """Per-prompt features the policies consume."""

    key: int
    template_id: int
    items: tuple[int, ...]
    category_token: int
    mode: Mode

    @classmethod
    def of(cls, prompt: PromptSpec, vocab: Vocabulary) -> "Context":
        rendered = np.asarray(render_prompt(prompt, vocab), dtype="<i8").tobytes()
        key = int.from_bytes(hashlib.blake2b(rendered, digest_size=8).digest(), "little")
        return cls(key, prompt.template_id, prompt.items, vocab.category_token[prompt.category], prompt.mode)


class Rows:
    """A batch of (context, step, prefix) positions to evaluate."""

    def __init__(self, ctxs: Sequence[Context], ctx_idx, steps, prefix):
        self.ctxs = list(ctxs)
        self.ctx_idx = np.asarray(ctx_idx, dtype=np.int64)
        self.steps = np.asarray(steps, dtype=np.int64)
        self.prefix = np.asarray(prefix, dtype=np.int64).reshape(len(self.steps), -1)

    def __len__(self):
        return len(self.steps)


class Policy:
    backend: str
    arrays: dict[str, np.ndarray]
    trainable: tuple[str, ...]

    def __init__(self, vocab: Vocabulary, max_response_len: int):
        self.vocab = vocab
        self.vocab_size = len(vocab)
        self.max_response_len = max_response_len

    def logits_rows(self, rows: Rows) -> np.ndarray:
        raise NotImplementedError

    def grad_rows(self, rows: Rows, targets: np.ndarray, weights) -> dict[str, np.ndarray]:
        """Gradient of sum_n weights[n] * log softmax(logits_n)[targets[n]].

        ``weights`` may be a callable; it then receives the target log-probs
        from the same forward pass and returns the weights.
        """
        raise NotImplementedError

    def context(self, prompt: PromptSpec) -> Context:
        return Context.of(prompt, self.vocab)

    def copy(self) -> "Policy":
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.arrays = {k: v.copy() for k, v in self.arrays.items()}
        return new

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(self.arrays[k]) for k in self.trainable}

    def _dlogits(self, logits, targets, weights):
        targets = np.asarray(targets)
        lsm = log_softmax(logits)
        n = np.arange(len(targets))
        if callable(weights):
            weights = weights(lsm[n, targets])
        weights = np.asarray(weights, dtype=np.float64)
        d = -np.exp(lsm) * weights[:, None]
        d[n, targets] += weights
        return d


class TabularPolicy(Policy):
    backend = "tabular"
    trainable = ("table",)

    def __init__(self, vocab: Vocabulary, keys: np.ndarray, table: np.ndarray):
        super().__init__(vocab, table.shape[1])
        self.arrays = {"keys": np.asarray(keys, dtype=np.uint64), "table": np.asarray(table, dtype=np.float64)}
        self._index = {int(k): i for i, k in enumerate(self.arrays["keys"])}

    @classmethod
    def init(cls, vocab: Vocabulary, prompts: Sequence[PromptSpec], max_response_len: int = 4) -> "TabularPolicy":
        keys = list(dict.fromkeys(Context.of(p, vocab).key for p in prompts))
        return cls(vocab, np.array(keys, dtype=np.uint64), np.zeros((len(keys), max_response_len, len(vocab))))

    def row_of(self, ctx: Context) -> int:
        try:
            return self._index[ctx.key]
        except KeyError:
            raise PolicyError("prompt not registered in tabular policy") from None

    def logits_rows(self, rows):
        rid = np.array([self.row_of(c) for c in rows.ctxs], dtype=np.int64)[rows.ctx_idx]
        return self.arrays["table"][rid, rows.steps].copy()

    def grad_rows(self, rows, targets, weights):
        rid = np.array([self.row_of(c) for c in rows.ctxs], dtype=np.int64)[rows.ctx_idx]
        d = self._dlogits(self.logits_rows(rows), targets, weights)
        g = np.zeros_like(self.arrays["table"])
        np.add.at(g, (rid, rows.steps), d)
        return {"table": g}


class MLPPolicy(Policy):
    backend = "mlp"
    trainable = ("E", "P", "T", "S", "W1", "b1", "Wo", "bo", "Cw", "Cb")

    def __init__(self, vocab: Vocabulary, arrays: dict[str, np.ndarray]):
        super().__init__(vocab, arrays["S"].shape[0])
        self.arrays = {k: np.asarray(arrays[k], dtype=np.float64) for k in self.trainable}

    @classmethod
    def init(cls, vocab: Vocabulary, rng: np.random.Generator, d_e: int = 16, d_h: int = 32,
             max_response_len: int = 4, scale: float = 0.05) -> "MLPPolicy":
        V, n_t = len(vocab), len(TEMPLATES)
        shapes = {"E": (V, d_e), "P": (MAX_LIST_LEN, d_e), "T": (n_t, d_e), "S": (max_response_len, d_e),
                  "W1": (d_h, 4 * d_e), "Wo": (V, d_h), "Cw": (MAX_LIST_LEN, d_h)}
        arrays = {k: rng.uniform(-scale, scale, size=s) for k, s in shapes.items()}
        arrays.update(b1=np.zeros(d_h), bo=np.zeros(V), Cb=np.zeros(MAX_LIST_LEN))
        return cls(vocab, arrays)

    @property
    def d_e(self) -> int:
        return self.arrays["E"].shape[1]

    def _item_table(self, ctxs):
        items = np.full((len(ctxs), MAX_LIST_LEN), -1, dtype=np.int64)
        for i, c in enumerate(ctxs):
            items[i, :len(c.items)] = c.items
        return items

    def _forward(self, rows: Rows):
        a = self.arrays
        E = a["E"]
        ctx_vec = np.zeros((len(rows.ctxs), self.d_e))
        for i, c in enumerate(rows.ctxs):
            if c.mode is Mode.LIST_SELECTION:
                n = len(c.items)
                ctx_vec[i] = (E[list(c.items)] + a["P"][:n]).mean(axis=0)
            else:
                ctx_vec[i] = E[c.category_token]
        tmpl = np.array([c.template_id for c in rows.ctxs], dtype=np.int64)

        steps = rows.steps
        pmask = np.arange(rows.prefix.shape[1])[None, :] < steps[:, None]
        safe = np.where(pmask, rows.prefix, 0)
        denom = np.maximum(steps, 1)[:, None]
        pref = (E[safe] * pmask[..., None]).sum(axis=1) / denom

        x = np.concatenate([ctx_vec[rows.ctx_idx], a["T"][tmpl[rows.ctx_idx]], pref, a["S"][steps]], axis=1)
        h = np.tanh(x @ a["W1"].T + a["b1"])
        logits = h @ a["Wo"].T + a["bo"]

        items = self._item_table(rows.ctxs)[rows.ctx_idx]
        imask = items >= 0
        copy = h @ a["Cw"].T + a["Cb"]
        r, j = np.nonzero(imask)
        logits[r, items[r, j]] += copy[r, j]
        cache = dict(x=x, h=h, items=items, imask=imask, pmask=pmask, safe=safe, denom=denom, tmpl=tmpl)
        return logits, cache

    def logits_rows(self, rows):
        return self._forward(rows)[0]

    def grad_rows(self, rows, targets, weights):
        a = self.arrays
        logits, c = self._forward(rows)
        d = self._dlogits(logits, targets, weights)
        g = self.zeros_like()
        h, x = c["h"], c["x"]

        g["Wo"] = d.T @ h
        g["bo"] = d.sum(axis=0)
        r, j = np.nonzero(c["imask"])
        dcopy = np.zeros((len(rows), MAX_LIST_LEN))
        dcopy[r, j] = d[r, c["items"][r, j]]
        g["Cw"] = dcopy.T @ h
        g["Cb"] = dcopy.sum(axis=0)
        dh = d @ a["Wo"] + dcopy @ a["Cw"]

        dpre = dh * (1.0 - h * h)
        g["W1"] = dpre.T @ x
        g["b1"] = dpre.sum(axis=0)
        dx = dpre @ a["W1"]
        de = self.d_e
        dctx, dtmpl, dpref, dstep = dx[:, :de], dx[:, de:2 * de], dx[:, 2 * de:3 * de], dx[:, 3 * de:]

        np.add.at(g["S"], rows.steps, dstep)
        np.add.at(g["T"], c["tmpl"][rows.ctx_idx], dtmpl)
        # prefix mean: each of the first `step` prefix tokens gets dpref / step
        share = (dpref / c["denom"])[:, None, :] * c["pmask"][..., None]
        np.add.at(g["E"], c["safe"].ravel(), share.reshape(-1, de))

        dctx_per = np.zeros((len(rows.ctxs), de))
        np.add.at(dctx_per, rows.ctx_idx, dctx)
        for i, ctx in enumerate(rows.ctxs):
            if ctx.mode is Mode.LIST_SELECTION:
                n = len(ctx.items)
                np.add.at(g["E"], list(ctx.items), np.broadcast_to(dctx_per[i] / n, (n, de)))
                g["P"][:n] += dctx_per[i] / n
            else:
                g["E"][ctx.category_token] += dctx_per[i]
        return g


@dataclass
class Rollout:
    tokens: tuple[int, ...]
    old_logprobs: np.ndarray
    parsed: ParsedAnswer

    def __len__(self):
        return len(self.tokens)


def forward_logits(policy: Policy, prompt: PromptSpec, prefix: Sequence[int]) -> np.ndarray:
    if len(prefix) >= policy.max_response_len:
        raise PolicyError(f"prefix length {len(prefix)} >= max_response_len {policy.max_response_len}")
    rows = Rows([policy.context(prompt)], [0], [len(prefix)],
                np.asarray(list(prefix) or [0], dtype=np.int64)[None, :])
    return policy.logits_rows(rows)[0]


def sample_arrays(policy: Policy, prompt: PromptSpec, cfg: DecodeConfig, rng: np.random.Generator,
                  n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized sampling of ``n`` rollouts: (tokens, logprobs, lengths), zero-padded."""
    T = min(cfg.max_response_len, policy.max_response_len)
    ctx = policy.context(prompt)
    tokens = np.zeros((n, T), dtype=np.int64)
    logps = np.zeros((n, T))
    lengths = np.zeros(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    for t in range(T):
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            break
        rows = Rows([ctx], np.zeros(len(idx), dtype=np.int64), np.full(len(idx), t), tokens[idx, :max(t, 1)])
        probs = apply_decode(policy.logits_rows(rows), cfg)
        cum = np.cumsum(probs, axis=1)
        u = rng.random(len(idx)) * cum[:, -1]
        choice = (cum <= u[:, None]).sum(axis=1)
        tokens[idx, t] = choice
        logps[idx, t] = np.log(probs[np.arange(len(idx)), choice])
        lengths[idx] += 1
        active[idx[(choice == ANSWER_CLOSE) | (choice == EOS)]] = False
    return tokens, logps, lengths


def sample_batch(policy: Policy, prompt: PromptSpec, cfg: DecodeConfig, rng: np.random.Generator,
                 n: int) -> list[Rollout]:
    """Sample ``n`` independent rollouts for one prompt, vectorized over rollouts."""
    tokens, logps, lengths = sample_arrays(policy, prompt, cfg, rng, n)
    valid = valid_set(prompt, policy.vocab)
    out = []
    for i in range(n):
        toks = tuple(int(v) for v in tokens[i, :lengths[i]])
        out.append(Rollout(toks, logps[i, :lengths[i]].copy(), parse_answer(toks, valid)))
    return out


def sample_rollout(policy: Policy, prompt: PromptSpec, cfg: DecodeConfig, rng: np.random.Generator) -> Rollout:
    return sample_batch(policy, prompt, cfg, rng, 1)[0]


def _token_rows(policy: Policy, prompts: Sequence[PromptSpec], seqs: Sequence[Sequence[int]],
                prompt_of: Sequence[int]):
    ctxs = [policy.context(p) for p in prompts]
    lengths = np.array([len(x) for x in seqs], dtype=np.int64)
    if len(lengths) and lengths.max() > policy.max_response_len:
        raise PolicyError(f"sequence length {lengths.max()} exceeds max_response_len")
    T = max(int(lengths.max()) if len(lengths) else 0, 1)
    padded = np.zeros((len(seqs), T), dtype=np.int64)
    for i, x in enumerate(seqs):
        padded[i, :len(x)] = x
    r, t = np.nonzero(np.arange(T)[None, :] < lengths[:, None])
    rows = Rows(ctxs, np.asarray(prompt_of, dtype=np.int64)[r], t, padded[r])
    return rows, padded[r, t]


def batch_logprobs(policy: Policy, prompts: Sequence[PromptSpec], seqs: Sequence[Sequence[int]],
                   prompt_of: Sequence[int]) -> list[np.ndarray]:
    """Raw-policy per-token log-probabilities for many sequences at once."""
    rows, targets = _token_rows(policy, prompts, seqs, prompt_of)
    if len(targets) == 0:
        return [np.zeros(0) for _ in seqs]
    lp = log_softmax(policy.logits_rows(rows))[np.arange(len(targets)), targets]
    out, k = [], 0
    for s in seqs:
        out.append(lp[k:k + len(s)])
        k += len(s)
    return out


def logprobs_under(policy: Policy, prompt: PromptSpec, tokens: Sequence[int]) -> np.ndarray:
    return batch_logprobs(policy, [prompt], [tokens], [0])[0]


def batch_grad(policy: Policy, prompts: Sequence[PromptSpec], seqs: Sequence[Sequence[int]],
               prompt_of: Sequence[int], weights) -> dict[str, np.ndarray]:
    """``weights``: one vector per sequence, or a callable on the flat token log-probs."""
    if callable(weights):
        rows, targets = _token_rows(policy, prompts, seqs, prompt_of)
        return policy.grad_rows(rows, targets, weights) if len(targets) else policy.zeros_like()
    for s, w in zip(seqs, weights):
        if len(w) != len(s):
            raise PolicyError(f"weight length {len(w)} does not match sequence length {len(s)}")
    if len(seqs) != len(weights):
        raise PolicyError("one weight vector per sequence required")
    rows, targets = _token_rows(policy, prompts, seqs, prompt_of)
    if len(targets) == 0:
        return policy.zeros_like()
    w = np.concatenate([np.asarray(x, dtype=np.float64) for x in weights])
    return policy.grad_rows(rows, targets, w)


def grad_weighted_logprob(policy: Policy, prompt: PromptSpec, rollouts: Sequence[Rollout],
                          per_token_weights: Sequence[np.ndarray]) -> dict[str, np.ndarray]:
    """Exact gradient of sum_i sum_t w[i][t] * log pi(o_it | prompt, o_i<t)."""
    return batch_grad(policy, [prompt], [r.tokens for r in rollouts], [0] * len(rollouts), per_token_weights)


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(policy: Policy, path: str | Path, rng_state: dict | None = None,
                    meta: dict | None = None) -> None:
    names = sorted(policy.arrays)
    header = {
        "format_version": FORMAT_VERSION,
        "backend": policy.backend,
        "vocab_size": policy.vocab_size,
        "max_response_len": policy.max_response_len,
        "categories": [[c, [policy.vocab.tokens[i].split(":", 1)[1] for i in ids]]
                       for c, ids in policy.vocab.category_items.items()],
        "arrays": [{"name": n, "dtype": "<u8" if policy.arrays[n].dtype == np.uint64 else "<f8",
                    "shape": list(policy.arrays[n].shape)} for n in names],
        "rng_state": rng_state,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for n, spec in zip(names, header["arrays"]):
            f.write(np.ascontiguousarray(policy.arrays[n], dtype=spec["dtype"]).tobytes())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[Policy, dict]:
    """Returns the policy and the decoded header (with ``rng_state`` and ``meta``)."""
    data = Path(path).read_bytes()
    if data[:len(_MAGIC)] != _MAGIC:
        raise PolicyError(f"{path}: not a checkpoint file")
    off = len(_MAGIC)
    (hlen,) = struct.unpack("<Q", data[off:off + 8])
    off += 8
    header = json.loads(data[off:off + hlen])
    off += hlen
    if header["format_version"] != FORMAT_VERSION:
        raise PolicyError(f"checkpoint format {header['format_version']} != supported {FORMAT_VERSION}")
    arrays = {}
    for spec in header["arrays"]:
        dt = np.dtype(spec["dtype"])
        n = int(np.prod(spec["shape"], dtype=np.int64)) * dt.itemsize
        arrays[spec["name"]] = np.frombuffer(data[off:off + n], dtype=dt).reshape(spec["shape"]).copy()
        off += n
    vocab = Vocabulary(dict((c, tuple(items)) for c, items in header["categories"]))
    if len(vocab) != header["vocab_size"]:
        raise PolicyError("vocabulary size mismatch")
    if header["backend"] == "mlp":
        policy: Policy = MLPPolicy(vocab, arrays)
    elif header["backend"] == "tabular":
        policy = TabularPolicy(vocab, arrays["keys"], arrays["table"])
    else:
        raise PolicyError(f"unknown backend {header['backend']!r}")
    return policy, header
