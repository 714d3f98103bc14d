"""Flat dotted-key run configuration.

One structured-text config file (``key = value`` per line, ``#`` comments)
drives every command; any key can also be overridden by a command-line flag
of the same name (``--train.temperature 0.1``). Unknown keys are rejected,
and every effective value is echoed into the run log so a run can be
reproduced from its log alone.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Any

from .model import ModelConfig
from .synth import SynthConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


# key -> (type tag, default, help)
SCHEMA: dict[str, tuple[str, Any, str]] = {
    "run.seed": ("int", 0, "master seed for generation, init, batching and dropout"),
    "run.threads": ("int", 0, "worker threads for corpus embedding (0 = PREGEN_THREADS env or 1)"),
    "paths.data": ("str", "", "dataset directory (train.manifest / test.manifest + stacks)"),
    "paths.manifest": ("str", "", "manifest file for single-manifest commands"),
    "paths.checkpoint": ("str", "", "model checkpoint file"),
    "paths.out": ("str", "", "output directory"),
    "synth.num_layers": ("int", 4, "stack rows per sample"),
    "synth.dim": ("int", 16, "feature width of each row"),
    "synth.alphabet_size": ("int", 4, "symbols per code position"),
    "synth.num_concepts": ("int", 64, "distinct concept codes"),
    "synth.group_size": ("int", 3, "same-source variants per concept"),
    "synth.noise_sigma": ("float", 0.05, "per-coordinate Gaussian noise scale"),
    "model.heads": ("int", 8, "attention heads"),
    "model.encoder_depth": ("int", 1, "encoder blocks"),
    "model.ffn_dim": ("int", 0, "feed-forward width (0 = 4 * dim)"),
    "model.mlp_depth": ("int", 2, "head linear layers"),
    "model.mlp_hidden": ("int", 14336, "head hidden width"),
    "model.output_dim": ("int", 0, "embedding width (0 = dim)"),
    "model.dropout": ("float", 0.1, "dropout probability"),
    "model.variant": ("str", "full", "full | single_layer | no_pe | avg_pool"),
    "train.batch_size": ("int", 1024, "triplets per batch"),
    "train.lr": ("float", 5e-5, "learning rate"),
    "train.weight_decay": ("float", 0.05, "decoupled weight decay"),
    "train.epochs": ("int", 1, "passes over the triplets"),
    "train.max_steps": ("int", 0, "optimizer step cap (0 = no cap)"),
    "train.grad_clip": ("float", 1.0, "global gradient-norm ceiling"),
    "train.temperature": ("float", 0.05, "InfoNCE temperature"),
    "train.beta1": ("float", 0.9, "Adam first-moment decay"),
    "train.beta2": ("float", 0.999, "Adam second-moment decay"),
    "train.eps": ("float", 1e-8, "Adam denominator epsilon"),
    "train.hard_negatives": ("bool", True, "pack same-source triplets into shared batches"),
    "eval.ks": ("str", "1,5,10,50", "comma-separated recall cutoffs"),
    "eval.exclude_self": ("bool", False, "drop gallery entries matching the query id"),
    "eval.variant": ("str", "", "variant override at eval time (empty = checkpoint variant)"),
    "ablate.variants": ("str", "full,single_layer,no_pe,avg_pool", "variants to compare"),
    "ablate.batching": ("str", "hard,random", "batching modes to compare"),
    "gradcheck.num_layers": ("int", 6, "gradient-check stack rows"),
    "gradcheck.dim": ("int", 16, "gradient-check feature width"),
    "gradcheck.heads": ("int", 4, "gradient-check attention heads"),
    "gradcheck.output_dim": ("int", 8, "gradient-check embedding width"),
    "gradcheck.mlp_hidden": ("int", 24, "gradient-check head hidden width"),
    "gradcheck.batch": ("int", 4, "gradient-check batch size"),
    "gradcheck.step": ("float", 1e-4, "finite-difference step"),
    "gradcheck.tolerance": ("float", 1e-4, "max allowed relative error"),
}

_PARSERS = {"int": int, "float": float, "bool": _parse_bool, "str": str}


@dataclass
class RunConfig:
    values: dict[str, Any]

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def require_path(self, key: str) -> str:
        value = self.values[key]
        if not value:
            raise ConfigError(f"config key {key!r} must be set for this command")
        return value

    def set(self, key: str, raw: str) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        kind = SCHEMA[key][0]
        try:
            self.values[key] = _PARSERS[kind](raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"config key {key!r}: {exc}") from exc

    def threads(self) -> int:
        if self.values["run.threads"] > 0:
            return self.values["run.threads"]
        try:
            return max(1, int(os.environ.get("PREGEN_THREADS", "1")))
        except ValueError:
            return 1

    def synth_config(self, split: str = "train") -> SynthConfig:
        return SynthConfig(
            num_layers=self["synth.num_layers"],
            dim=self["synth.dim"],
            alphabet_size=self["synth.alphabet_size"],
            num_concepts=self["synth.num_concepts"],
            group_size=self["synth.group_size"],
            noise_sigma=self["synth.noise_sigma"],
            seed=self["run.seed"],
            split=split,
        )

    def model_config(self, num_layers: int, dim: int, variant: str | None = None) -> ModelConfig:
        return ModelConfig(
            num_layers=num_layers,
            dim=dim,
            heads=self["model.heads"],
            encoder_depth=self["model.encoder_depth"],
            ffn_dim=self["model.ffn_dim"],
            mlp_depth=self["model.mlp_depth"],
            mlp_hidden=self["model.mlp_hidden"],
            output_dim=self["model.output_dim"],
            dropout=self["model.dropout"],
            variant=variant if variant is not None else self["model.variant"],
        )

    def train_config(self, hard_negatives: bool | None = None, seed: int | None = None) -> TrainConfig:
        return TrainConfig(
            batch_size=self["train.batch_size"],
            lr=self["train.lr"],
            weight_decay=self["train.weight_decay"],
            epochs=self["train.epochs"],
            grad_clip=self["train.grad_clip"],
            temperature=self["train.temperature"],
            beta1=self["train.beta1"],
            beta2=self["train.beta2"],
            eps=self["train.eps"],
            hard_negative_batching=(
                self["train.hard_negatives"] if hard_negatives is None else hard_negatives
            ),
            seed=self["run.seed"] if seed is None else seed,
        )

    def max_steps(self) -> int | None:
        return self["train.max_steps"] or None

    def eval_ks(self) -> tuple[int, ...]:
        try:
            ks = tuple(int(tok) for tok in str(self["eval.ks"]).split(",") if tok.strip())
        except ValueError as exc:
            raise ConfigError(f"eval.ks: {exc}") from exc
        if not ks or any(k < 1 for k in ks):
            raise ConfigError(f"eval.ks must be positive integers, got {self['eval.ks']!r}")
        return ks

    def effective_text(self) -> str:
        lines = [f"{key} = {self.values[key]}" for key in sorted(self.values)]
        return "\n".join(lines) + "\n"


def default_config() -> RunConfig:
    return RunConfig({key: spec[1] for key, spec in SCHEMA.items()})


def load_config_file(path: str) -> RunConfig:
    config = default_config()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            try:
                config.set(key, value)
            except ConfigError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from exc
    return config
