"""Command-line entry point.

Usage:
    pregen synth-gen  --paths.out data/               # write train+test datasets
    pregen validate   --paths.manifest data/train.manifest
    pregen plan-batches --paths.manifest data/train.manifest --paths.out run/
    pregen train      --paths.manifest data/train.manifest --paths.out run/
    pregen eval       --paths.manifest data/test.manifest \
                      --paths.checkpoint run/checkpoint.pgck --paths.out run/
    pregen embed      --paths.manifest data/test.manifest \
                      --paths.checkpoint run/checkpoint.pgck --paths.out run/ --side target
    pregen ablate     --paths.data data/ --paths.out run/
    pregen gradcheck

Every command takes ``--config FILE`` plus ``--<dotted.key> value`` overrides
for any key in the config schema; the effective configuration is echoed to
stdout and written next to the outputs. Outputs are written atomically.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as gradcheck_mod
from . import retrieval, synth, training
from .config import SCHEMA, ConfigError, RunConfig, default_config, load_config_file
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .stackio import load_manifest, store_for_manifest, validate_dataset
from .util import atomic_write_bytes

COMMANDS = (
    "synth-gen",
    "validate",
    "plan-batches",
    "train",
    "embed",
    "eval",
    "ablate",
    "gradcheck",
)


class CliError(Exception):
    pass


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pregen", allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, allow_abbrev=False)
        p.add_argument("--config", default=None, help="config file of key = value lines")
        for key, (_kind, _default, help_text) in SCHEMA.items():
            p.add_argument(f"--{key}", dest=key, default=None, metavar="V", help=help_text)
        if name == "embed":
            p.add_argument("--side", choices=("query", "target"), default="target")
    return parser


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    config = load_config_file(args.config) if args.config else default_config()
    for key in SCHEMA:
        override = getattr(args, key, None)
        if override is not None:
            config.set(key, override)
    return config


def _echo_config(config: RunConfig, out_dir: Path | None) -> None:
    text = config.effective_text()
    sys.stdout.write(text)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        atomic_write_bytes(out_dir / "run_config.txt", text.encode("utf-8"))


def _stats_line(stats) -> str:
    return (
        f"samples={stats.samples} triplets={stats.triplets} groups={stats.num_groups} "
        f"group_size_hist={dict(sorted(stats.group_size_hist.items()))} errors={len(stats.errors)}"
    )


def cmd_synth_gen(config: RunConfig) -> int:
    out_dir = Path(config.require_path("paths.out"))
    _echo_config(config, out_dir)
    for split in ("train", "test"):
        dataset = synth.generate_synthetic_dataset(config.synth_config(split))
        manifest_path = synth.write_dataset(dataset, out_dir)
        stats = validate_dataset(dataset.manifest, store_for_manifest(manifest_path))
        print(f"{split}: wrote {manifest_path}; {_stats_line(stats)}")
        if stats.errors:
            for err in stats.errors:
                print(f"error: {err}", file=sys.stderr)
            return 1
    return 0


def cmd_validate(config: RunConfig) -> int:
    manifest_path = config.require_path("paths.manifest")
    _echo_config(config, None)
    manifest = load_manifest(manifest_path)
    stats = validate_dataset(manifest, store_for_manifest(manifest_path))
    print(_stats_line(stats))
    for err in stats.errors:
        print(f"error: {err}", file=sys.stderr)
    return 0 if stats.ok else 1


def cmd_plan_batches(config: RunConfig) -> int:
    manifest_path = config.require_path("paths.manifest")
    out_dir = Path(config.require_path("paths.out"))
    _echo_config(config, out_dir)
    manifest = load_manifest(manifest_path)
    train_config = config.train_config()
    plan = training.build_batches(
        manifest.triplets,
        train_config.batch_size,
        train_config.seed,
        train_config.hard_negative_batching,
    )
    plan_path = out_dir / "batch_plan.txt"
    training.save_batch_plan(plan, plan_path)
    print(
        f"wrote {plan_path}: {len(plan.batches)} batches, "
        f"{len(plan.covered_indices())} triplets covered, {len(plan.dropped)} dropped"
    )
    return 0


def cmd_train(config: RunConfig) -> int:
    manifest_path = config.require_path("paths.manifest")
    out_dir = Path(config.require_path("paths.out"))
    _echo_config(config, out_dir)
    manifest = load_manifest(manifest_path)
    store = store_for_manifest(manifest_path)
    model_config = config.model_config(manifest.num_layers, manifest.dim)
    train_config = config.train_config()
    params, log = training.train(
        manifest, store, model_config, train_config, max_steps=config.max_steps()
    )
    plan = training.build_batches(
        manifest.triplets,
        train_config.batch_size,
        train_config.seed,
        train_config.hard_negative_batching,
    )
    training.save_batch_plan(plan, out_dir / "batch_plan.txt")
    training.save_training_log(log, out_dir / "train_log.txt")
    checkpoint_path = out_dir / "checkpoint.pgck"
    save_checkpoint(params, model_config, checkpoint_path)
    last = log.records[-1] if log.records else None
    print(
        f"wrote {checkpoint_path}: {len(log.records)} steps"
        + (f", final loss {last.loss:.6f}" if last else "")
    )
    return 0


def cmd_embed(config: RunConfig, side: str) -> int:
    manifest_path = config.require_path("paths.manifest")
    checkpoint_path = config.require_path("paths.checkpoint")
    out_dir = Path(config.require_path("paths.out"))
    _echo_config(config, out_dir)
    manifest = load_manifest(manifest_path)
    store = store_for_manifest(manifest_path)
    params, model_config = load_checkpoint(checkpoint_path)
    matrix = retrieval.embed_corpus(
        manifest, side, store, params, model_config, threads=config.threads()
    )
    out_path = out_dir / f"embeddings_{side}.npz"
    np.savez(out_path, ids=np.array(matrix.ids), vectors=matrix.vectors)
    print(f"wrote {out_path}: {matrix.vectors.shape[0]} x {matrix.vectors.shape[1]}")
    return 0


def cmd_eval(config: RunConfig) -> int:
    manifest_path = config.require_path("paths.manifest")
    checkpoint_path = config.require_path("paths.checkpoint")
    out_dir = Path(config.require_path("paths.out"))
    _echo_config(config, out_dir)
    manifest = load_manifest(manifest_path)
    store = store_for_manifest(manifest_path)
    params, model_config = load_checkpoint(checkpoint_path)
    report = retrieval.evaluate(
        manifest,
        store,
        params,
        model_config,
        ks=config.eval_ks(),
        variant_override=config["eval.variant"] or None,
        exclude_self=config["eval.exclude_self"],
    )
    text = retrieval.report_to_text(report)
    atomic_write_bytes(out_dir / "report.txt", text.encode("utf-8"))
    retrieval.save_report(report, out_dir / "report.jsonl")
    sys.stdout.write(text)
    return 0


def cmd_ablate(config: RunConfig) -> int:
    data_dir = Path(config.require_path("paths.data"))
    out_dir = Path(config.require_path("paths.out"))
    _echo_config(config, out_dir)
    train_manifest = load_manifest(data_dir / "train.manifest")
    test_manifest = load_manifest(data_dir / "test.manifest")
    train_store = store_for_manifest(data_dir / "train.manifest")
    test_store = store_for_manifest(data_dir / "test.manifest")

    variants = [v.strip() for v in config["ablate.variants"].split(",") if v.strip()]
    modes = [m.strip() for m in config["ablate.batching"].split(",") if m.strip()]
    for mode in modes:
        if mode not in ("hard", "random"):
            raise ConfigError(f"ablate.batching entries must be hard|random, got {mode!r}")
    ks = config.eval_ks()

    rows = []
    for variant in variants:
        for mode in modes:
            model_config = config.model_config(
                train_manifest.num_layers, train_manifest.dim, variant=variant
            )
            train_config = config.train_config(hard_negatives=(mode == "hard"))
            params, _ = training.train(
                train_manifest,
                train_store,
                model_config,
                train_config,
                max_steps=config.max_steps(),
            )
            report = retrieval.evaluate(test_manifest, test_store, params, model_config, ks=ks)
            rows.append((variant, mode, report.recall))

    width = max(len(v) for v, _, _ in rows) + 2
    header = f"{'variant':<{width}}{'batching':<8}" + "".join(f"{f'R@{k}':>8}" for k in ks)
    lines = [header]
    for variant, mode, recall in rows:
        lines.append(
            f"{variant:<{width}}{mode:<8}" + "".join(f"{recall[k]:>8.4f}" for k in ks)
        )
    table = "\n".join(lines) + "\n"
    atomic_write_bytes(out_dir / "ablation.txt", table.encode("utf-8"))
    sys.stdout.write(table)
    return 0


def cmd_gradcheck(config: RunConfig) -> int:
    _echo_config(config, None)
    model_config = ModelConfig(
        num_layers=config["gradcheck.num_layers"],
        dim=config["gradcheck.dim"],
        heads=config["gradcheck.heads"],
        output_dim=config["gradcheck.output_dim"],
        mlp_hidden=config["gradcheck.mlp_hidden"],
        dropout=0.0,
        variant="full",
    )
    report = gradcheck_mod.gradient_check(
        model_config,
        batch=config["gradcheck.batch"],
        temperature=config["train.temperature"],
        seed=config["run.seed"],
        step=config["gradcheck.step"],
        tolerance=config["gradcheck.tolerance"],
    )
    sys.stdout.write(report.to_text())
    return 0 if report.passed else 1


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        config = _resolve_config(args)
        if args.command == "synth-gen":
            return cmd_synth_gen(config)
        if args.command == "validate":
            return cmd_validate(config)
        if args.command == "plan-batches":
            return cmd_plan_batches(config)
        if args.command == "train":
            return cmd_train(config)
        if args.command == "embed":
            return cmd_embed(config, args.side)
        if args.command == "eval":
            return cmd_eval(config)
        if args.command == "ablate":
            return cmd_ablate(config)
        if args.command == "gradcheck":
            return cmd_gradcheck(config)
        raise CliError(f"unknown command {args.command!r}")
    except Exception as exc:  # surface actionable one-line errors, not tracebacks
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
