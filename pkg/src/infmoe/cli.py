"""Command-line interface: train / eval / ablate / bench.

Configuration is one JSON document with sections ``model``, ``train``,
``data``, and ``bench``; unknown keys are rejected with their full path.
Every run echoes the fully resolved configuration next to its outputs so
the exact run can be reproduced by feeding that file back in.

Exit codes: 0 success, 2 user/config error, 3 numeric divergence,
4 correctness-gate failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

from .bench import BenchConfig, run_bench, write_bench_csv
from .checkpoint import load_checkpoint
from .errors import CheckpointError, ContractError, NumericError
from .model import ModelConfig
from .training import (TrainConfig, eval_ppl, load_corpus, run_ablation,
                       train, write_ablation_csv)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_GATE = 4

DEFAULT_DATA = {"path": "data/corpus.txt", "train_fraction": 0.9}
_SECTIONS = ("model", "train", "data", "bench")


class ConfigError(ContractError):
    pass


def _check_keys(section: str, given: dict, allowed: set) -> None:
    for key in given:
        if key not in allowed:
            raise ConfigError(f"unknown config key: {section}.{key}")


def load_run_config(path) -> dict:
    """Parse and validate the run configuration document."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    for key in raw:
        if key not in _SECTIONS:
            raise ConfigError(f"unknown config key: {key}")

    _check_keys("model", raw.get("model", {}), {f.name for f in fields(ModelConfig)})
    _check_keys("train", raw.get("train", {}), {f.name for f in fields(TrainConfig)})
    _check_keys("bench", raw.get("bench", {}), {f.name for f in fields(BenchConfig)})
    _check_keys("data", raw.get("data", {}), set(DEFAULT_DATA))

    try:
        model = ModelConfig.from_dict(raw.get("model", {}))
        train_cfg = TrainConfig.from_dict(raw.get("train", {}))
        bench = BenchConfig.from_dict(raw.get("bench", {}))
    except (ContractError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    data = {**DEFAULT_DATA, **raw.get("data", {})}
    return {"model": model, "train": train_cfg, "data": data, "bench": bench}


def resolved_config_dict(cfg: dict) -> dict:
    return {
        "model": cfg["model"].to_dict(),
        "train": cfg["train"].to_dict(),
        "data": cfg["data"],
        "bench": cfg["bench"].to_dict(),
    }


def _write_resolved(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(
        json.dumps(resolved_config_dict(cfg), sort_keys=True, indent=2) + "\n")


def _cap_threads(default_limit):
    """Apply IMOE_THREADS (or the command default) to BLAS thread pools."""
    env = os.environ.get("IMOE_THREADS")
    limit = int(env) if env else default_limit
    if limit is None:
        return
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(limits=limit)
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(limit)


def cmd_train(args) -> int:
    try:
        cfg = load_run_config(args.config)
        if args.variant is not None:
            cfg["model"] = ModelConfig.from_dict(
                {**cfg["model"].to_dict(), "variant": args.variant})
        if args.seed is not None:
            cfg["model"] = ModelConfig.from_dict(
                {**cfg["model"].to_dict(), "seed": args.seed})
            cfg["train"] = TrainConfig.from_dict(
                {**cfg["train"].to_dict(), "seed": args.seed})
        corpus_path = Path(cfg["data"]["path"])
        if not corpus_path.exists():
            print(f"error: corpus file not found: {corpus_path}", file=sys.stderr)
            return EXIT_CONFIG
        corpus = load_corpus(corpus_path)
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    _cap_threads(default_limit=None)
    out_dir = Path(args.out)
    _write_resolved(cfg, out_dir)
    try:
        train(cfg["model"], cfg["train"], corpus, out_dir=out_dir,
              log=lambda msg: print(msg, flush=True))
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"wrote {out_dir / 'checkpoint.imoe'} and {out_dir / 'metrics.csv'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        config, params = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.K is not None and config.variant != "inf-moe":
        print(f"error: --K applies only to inf-moe checkpoints "
              f"(this one is {config.variant})", file=sys.stderr)
        return EXIT_CONFIG
    data_path = Path(args.data)
    if not data_path.exists():
        print(f"error: data file not found: {data_path}", file=sys.stderr)
        return EXIT_CONFIG
    _cap_threads(default_limit=None)
    data = load_corpus(data_path)
    t0 = time.perf_counter()
    try:
        ppl = eval_ppl(config, params, data, K=args.K)
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    wall = time.perf_counter() - t0
    n_tokens = (len(data) - 1) // config.block_size * config.block_size
    print(f"ppl={ppl:.6f}")
    print(f"tokens_per_s={n_tokens / wall:.1f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    try:
        values = [int(v) for v in args.values.split(",") if v.strip() != ""]
        if not values:
            raise ConfigError("--values must list at least one integer")
        cfg = load_run_config(args.config)
        corpus_path = Path(cfg["data"]["path"])
        if not corpus_path.exists():
            print(f"error: corpus file not found: {corpus_path}", file=sys.stderr)
            return EXIT_CONFIG
        corpus = load_corpus(corpus_path)
    except (ConfigError, ContractError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    _cap_threads(default_limit=None)
    out_dir = Path(args.out)
    _write_resolved(cfg, out_dir)
    try:
        rows = run_ablation(args.axis, values, cfg["model"], cfg["train"], corpus,
                            train_k=args.train_k,
                            log=lambda msg: print(msg, flush=True))
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    out_path = out_dir / f"ablation_{args.axis}.csv"
    write_ablation_csv(out_path, rows)
    print(f"wrote {out_path}")
    return EXIT_OK


def cmd_bench(args) -> int:
    try:
        cfg = load_run_config(args.config) if args.config else {
            "model": ModelConfig(), "train": TrainConfig(),
            "data": dict(DEFAULT_DATA), "bench": BenchConfig()}
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _cap_threads(default_limit=1)
    out_dir = Path(args.out)
    _write_resolved(cfg, out_dir)
    records = run_bench(cfg["bench"], log=lambda msg: print(msg, flush=True))
    out_path = out_dir / "bench.csv"
    write_bench_csv(out_path, records)
    print(f"wrote {out_path}")
    if any(not r.checksum_ok for r in records):
        print("error: equivalence checksum failed for at least one cell",
              file=sys.stderr)
        return EXIT_GATE
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="infmoe",
        description="Train and study a continuous-expert-space MoE language model.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model variant")
    t.add_argument("--config", required=True, help="run config JSON")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int, default=None, help="override model+train seeds")
    t.add_argument("--variant", choices=["dense", "switch", "moe", "inf-moe"],
                   default=None, help="override the model variant")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate perplexity of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="held-out text file")
    e.add_argument("--K", type=int, default=None,
                   help="inference-time sample count (inf-moe only)")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="sweep one axis, writing a results CSV")
    a.add_argument("--axis", required=True, choices=["dz", "K", "experts"])
    a.add_argument("--values", required=True, help="comma-separated integers")
    a.add_argument("--config", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--train-k", type=int, default=None, dest="train_k",
                   help="K axis: train once at this K, sweep eval-time K")
    a.set_defaults(fn=cmd_ablate)

    b = sub.add_parser("bench", help="masked-FFN latency benchmark")
    b.add_argument("--config", default=None)
    b.add_argument("--out", required=True)
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
