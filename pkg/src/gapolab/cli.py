"""Command line entry point: train, eval, verify, compare, sample.

Exit codes: 0 success, 1 usage or config error, 2 verification failure,
3 numerical failure during training.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__, evaluate, experiment, metrics, oracle
from .config import ConfigError, ExperimentConfig, from_dict, load
from .policy import FORMAT_VERSION, DecodeConfig, PolicyError, load_checkpoint, sample_batch, save_checkpoint
from .reward import write_reward_trace
from .task_gen import render_prompt
from .trainer import TrainingError, stream

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_NUMERIC = 0, 1, 2, 3
SUITES = ("UNIFORMITY", "OPENSET", "CREATIVE_TOKENS")


class UsageError(Exception):
    pass


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = cfg.resolved_output_dir()
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise UsageError(f"output_dir: cannot write to {out}: {e}") from None
    return out


def _rng_state(seed: int, name: str) -> dict:
    return stream(seed, name).bit_generator.state


def cmd_train(args) -> int:
    cfg = load(args.config)
    out = _out_dir(cfg)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    manifest = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "package_version": __version__,
        "checkpoint_format": FORMAT_VERSION,
        "numpy_version": np.__version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "artifacts": {
            "checkpoints": "checkpoints/",
            "step_log": "step_log.jsonl",
            "trajectory": "trajectory.csv",
            "reward_trace": "reward_trace.jsonl" if cfg.reward_trace else None,
        },
    }
    atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))

    setup = experiment.build_setup(cfg)
    base = experiment.base_policy(cfg, setup)
    meta = {"config": cfg.to_dict()}

    def checkpoint(step, policy):
        save_checkpoint(policy, ckpt_dir / f"step_{step:06d}.ckpt", _rng_state(cfg.seed, "rollouts"),
                        {**meta, "step": step})

    checkpoint(0, base)
    if cfg.train.total_steps == 0:
        return EXIT_OK

    log_fh = open(out / "step_log.jsonl", "w")
    trace_fh = open(out / "reward_trace.jsonl", "w") if cfg.reward_trace else None
    trace = (lambda group, rewards: write_reward_trace(trace_fh, group, rewards, setup.vocab)) if trace_fh else None
    try:
        result = experiment.run_method(
            cfg, setup, base, cfg.reward,
            on_step=lambda e: log_fh.write(json.dumps(e, sort_keys=True) + "\n"),
            checkpoint=checkpoint, trace=trace)
    finally:
        log_fh.close()
        if trace_fh:
            trace_fh.close()
    save_checkpoint(result.policy, ckpt_dir / "final.ckpt", _rng_state(cfg.seed, "rollouts"),
                    {**meta, "step": cfg.train.total_steps})
    atomic_write(out / "trajectory.csv", "".join(
        [metrics.MetricReport.CSV_HEADER + "\n"] + [rep.csv_row(step) + "\n" for step, rep in result.trajectory]))
    print(f"final held-out jsd {result.trajectory[-1][1].jsd:.4f}" if result.trajectory else "done")
    return EXIT_OK


def _config_from_meta(header: dict, seed: int | None) -> ExperimentConfig:
    data = dict((header.get("meta") or {}).get("config") or {})
    if seed is not None:
        data["seed"] = seed
    return from_dict(data)


def cmd_eval(args) -> int:
    if args.suite not in SUITES:
        raise UsageError(f"suite: must be one of {SUITES} (got {args.suite!r})")
    try:
        policy, header = load_checkpoint(args.checkpoint)
    except (OSError, PolicyError) as e:
        raise UsageError(f"checkpoint: {e}") from None
    cfg = _config_from_meta(header, args.seed)
    setup = experiment.build_setup(cfg)
    decode = DecodeConfig(max_response_len=policy.max_response_len)
    rng = stream(cfg.seed, "eval_cmd", SUITES.index(args.suite))
    if args.suite == "UNIFORMITY":
        u = evaluate.uniformity(policy, setup.eval_prompts, cfg.eval.list_samples, decode, rng)
        report = {"per_list_jsd": u.per_list_jsd, "jsd": u.jsd, "per_list_unique": u.per_list_unique,
                  "entropy": u.entropy, "valid_fraction": u.valid_fraction}
        summary = f"mean jsd {u.jsd:.4f}"
    elif args.suite == "OPENSET":
        runs = evaluate.openset(policy, setup.open_prompts, cfg.eval.open_samples, decode, rng)
        report = {"curves": [c for c, _ in runs], "unique_at_n": [f for _, f in runs],
                  "n": cfg.eval.open_samples}
        summary = f"unique@{cfg.eval.open_samples} {[f for _, f in runs]}"
    else:
        sb, div, uniq = evaluate.creative_tokens(policy, setup.open_prompts, cfg.eval.creative_samples, decode, rng)
        report = {"self_bleu": sb, "diversity": div, "unique_texts": uniq}
        summary = f"self-bleu {sb:.4f} diversity {div:.4f}"
    report.update(suite=args.suite, seed=cfg.seed, checkpoint=str(args.checkpoint))
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(
        f"{Path(args.checkpoint).stem}.{args.suite.lower()}.seed{cfg.seed}.json")
    atomic_write(out, json.dumps(report, indent=2, sort_keys=True))
    print(summary)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = oracle.run_verify_suite(seed=args.seed, fast=not args.full)
    text = oracle.report_json(results)
    if args.out:
        atomic_write(Path(args.out), text)
    print(text)
    return EXIT_OK if all(r.status == "pass" for r in results) else EXIT_VERIFY


def cmd_compare(args) -> int:
    cfg = load(args.config)
    out = _out_dir(cfg)
    rows = experiment.compare(cfg)
    cols = ("method", "js", "unique_at_n")
    atomic_write(out / "compare.csv", _csv_text(cols, [[r[c] for c in cols] for r in rows]))
    print(f"{'method':<18} {'js':>8} {'unique_at_n':>12}")
    for r in rows:
        print(f"{r['method']:<18} {r['js']:>8.4f} {r['unique_at_n']:>12.2f}")
    return EXIT_OK


def cmd_sample(args) -> int:
    try:
        policy, header = load_checkpoint(args.checkpoint)
    except (OSError, PolicyError) as e:
        raise UsageError(f"checkpoint: {e}") from None
    cfg = _config_from_meta(header, args.seed)
    setup = experiment.build_setup(cfg)
    prompts = setup.eval_prompts + setup.open_prompts
    if not 0 <= args.prompt_index < len(prompts):
        raise UsageError(f"prompt-index: must lie in [0, {len(prompts) - 1}]")
    prompt = prompts[args.prompt_index]
    rng = stream(cfg.seed, "sample", args.prompt_index)
    rollouts = sample_batch(policy, prompt, DecodeConfig(max_response_len=policy.max_response_len), rng, args.n)
    vocab = policy.vocab
    print(" ".join(vocab.decode(render_prompt(prompt, vocab))))
    for r in rollouts:
        print(" ".join(vocab.decode(r.tokens)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gapolab", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a policy from a YAML config")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--suite", required=True, type=str.upper)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("verify", help="run the oracle verification suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--full", action="store_true", help="20 surrogate instances instead of 3")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("compare", help="base / min-p / SFT / GAPO comparison table")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("sample", help="print sampled responses for one held-out prompt")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt-index", type=int, required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_sample)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    try:
        return args.fn(args)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
