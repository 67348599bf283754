"""Run configuration: one YAML document layered over built-in defaults."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .instructions import TASKS, DatasetConfig
from .model import MicroLMConfig
from .perceiver import PerceiverConfig
from .prompt import default_system_messages
from .training import TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "paths": {
        "scenes": "scenes",
        "ingest": "out/ingest",
        "dataset": "out/dataset",
        "checkpoints": "out/checkpoints",
        "reports": "out/reports",
    },
    "perceiver": {},
    "model": {},
    "train": {},
    "dataset": {
        "quotas": {"vqa": 100, "grounding": 100, "multiple_choice": 50, "caption": None, "conversation": 20},
        "val_fraction": 0.2,
        "n_turns": 2,
        "proportional_total": None,
    },
    "eval": {"split": "val", "max_new_tokens": 64},
    "system_messages": {},
}


def _merge(base: dict, override: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict) and k != "quotas":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _check_keys(section: str, doc: Mapping, allowed) -> None:
    unknown = set(doc) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {sorted(unknown)}")


@dataclass
class RunConfig:
    seed: int
    paths: dict[str, Path]
    perceiver: PerceiverConfig
    model: dict[str, Any]
    train: TrainConfig
    dataset: DatasetConfig
    eval: dict[str, Any]
    system_messages: dict[str, str] = field(default_factory=dict)

    def lm_config(self, vocab_size: int) -> MicroLMConfig:
        return MicroLMConfig(vocab_size=vocab_size, seed=self.seed, **self.model)

    def describe(self) -> dict:
        """Path-free view of the config, safe to embed in deterministic outputs."""
        return {
            "seed": self.seed,
            "perceiver": self.perceiver.to_dict(),
            "model": dict(self.model),
            "train": {f.name: getattr(self.train, f.name) for f in fields(self.train)},
            "dataset": {
                "quotas": self.dataset.quotas,
                "val_fraction": self.dataset.val_fraction,
                "n_turns": self.dataset.n_turns,
                "proportional_total": self.dataset.proportional_total,
            },
            "eval": dict(self.eval),
        }


def build_config(doc: Mapping | None = None, base_dir: str | Path = ".", seed: int | None = None) -> RunConfig:
    """Validate a raw config mapping and resolve relative paths against ``base_dir``."""
    doc = dict(doc or {})
    _check_keys("<root>", doc, DEFAULTS)
    merged = _merge(DEFAULTS, doc)
    if seed is not None:
        merged["seed"] = seed
    s = merged["seed"]
    if not isinstance(s, int):
        raise ConfigError("seed must be an integer")
    _check_keys("paths", merged["paths"], DEFAULTS["paths"])
    base = Path(base_dir)
    paths = {k: (base / v) if not Path(v).is_absolute() else Path(v) for k, v in merged["paths"].items()}

    pdoc = merged["perceiver"]
    _check_keys("perceiver", pdoc, {f.name for f in fields(PerceiverConfig)} - {"seed"})
    try:
        perceiver = PerceiverConfig(**pdoc, seed=s)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"perceiver: {exc}") from exc

    mdoc = dict(merged["model"])
    _check_keys("model", mdoc, {f.name for f in fields(MicroLMConfig)} - {"vocab_size", "seed"})
    if "lora_targets" in mdoc:
        mdoc["lora_targets"] = tuple(mdoc["lora_targets"])
    try:
        MicroLMConfig(vocab_size=8, **mdoc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from exc
    if mdoc.get("d_model", 128) != perceiver.d_model:
        raise ConfigError("model.d_model must equal perceiver.d_model")

    tdoc = merged["train"]
    _check_keys("train", tdoc, {f.name for f in fields(TrainConfig)} - {"seed"})
    train = TrainConfig(**tdoc, seed=s)
    if train.lr <= 0 or train.steps < 0 or train.batch_size < 1 or train.grad_accum < 1:
        raise ConfigError("train: lr > 0, steps >= 0, batch_size >= 1, grad_accum >= 1 required")

    ddoc = merged["dataset"]
    _check_keys("dataset", ddoc, DEFAULTS["dataset"])
    quotas = dict(ddoc["quotas"])
    _check_keys("dataset.quotas", quotas, TASKS)
    dataset = DatasetConfig(
        quotas=quotas,
        seed=s,
        val_fraction=float(ddoc["val_fraction"]),
        n_turns=int(ddoc["n_turns"]),
        proportional_total=ddoc["proportional_total"],
    )
    if not 0 <= dataset.val_fraction < 1:
        raise ConfigError("dataset.val_fraction must be in [0, 1)")

    _check_keys("eval", merged["eval"], DEFAULTS["eval"])
    if merged["eval"]["split"] not in ("train", "val"):
        raise ConfigError("eval.split must be 'train' or 'val'")

    messages = default_system_messages()
    extra = merged["system_messages"] or {}
    _check_keys("system_messages", extra, TASKS)
    messages.update(extra)
    return RunConfig(s, paths, perceiver, mdoc, train, dataset, dict(merged["eval"]), messages)


def load_config(path: str | Path | None, seed: int | None = None) -> RunConfig:
    if path is None:
        return build_config({}, Path.cwd(), seed)
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, Mapping):
        raise ConfigError("config must be a mapping")
    return build_config(doc, path.parent, seed)
