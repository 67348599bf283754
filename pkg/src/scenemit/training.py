"""Adapter training loop and checkpoint container."""

from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .instructions import InstructionSample
from .model import MicroLM, MicroLMConfig, SceneLM, collate, frozen_hash, masked_loss
from .perceiver import Perceiver, PerceiverConfig, SceneFeatures
from .prompt import PromptSequence, Vocabulary, assemble_prompt

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    # Reference recipe at scale: lr 5e-4, grad accumulation 32, micro batch 1.
    lr: float = 5e-4
    steps: int = 500
    batch_size: int = 8
    grad_accum: int = 1
    grad_clip: float | None = 1.0
    weight_decay: float = 0.0
    warmup_steps: int = 20
    schedule: str = "cosine"  # or "constant"
    min_lr_ratio: float = 0.1
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 0


@dataclass
class Example:
    sample_id: str
    scene_id: str
    prompt: PromptSequence


@dataclass
class TrainState:
    step: int
    optimizer: torch.optim.Optimizer
    loss_history: list[tuple[int, float]] = field(default_factory=list)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    order: list[int] = field(default_factory=list)


def make_example(
    sample: InstructionSample,
    features: SceneFeatures,
    vocab: Vocabulary,
    system_messages: Mapping[str, str],
    with_answer: bool = True,
) -> Example:
    n = features.n_objects
    prompt = assemble_prompt(
        system_messages[sample.task],
        features.scene,
        range(n),
        sample.instruction,
        sample.answer if with_answer else None,
        vocab,
        n_objects=n,
    )
    return Example(sample.sample_id, sample.scene_id, prompt)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup, then cosine decay to ``min_lr_ratio * lr`` at ``cfg.steps``."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    if cfg.schedule == "constant":
        return cfg.lr
    span = max(1, cfg.steps - cfg.warmup_steps)
    t = min(1.0, (step - cfg.warmup_steps) / span)
    return cfg.lr * (cfg.min_lr_ratio + (1 - cfg.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * t)))


def init_state(model: SceneLM, cfg: TrainConfig) -> TrainState:
    params = [p for _, p in model.trainable_parameters()]
    opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    return TrainState(step=0, optimizer=opt, rng=np.random.default_rng(cfg.seed))


def next_micro_batches(state: TrainState, n_examples: int, cfg: TrainConfig) -> list[list[int]]:
    """Draw ``grad_accum`` micro-batches from a seeded epoch-wise permutation."""
    out = []
    for _ in range(cfg.grad_accum):
        idx = []
        while len(idx) < min(cfg.batch_size, n_examples):
            if not state.order:
                state.order = [int(i) for i in state.rng.permutation(n_examples)]
            idx.append(state.order.pop(0))
        out.append(idx)
    return out


def backward_and_step(
    model: SceneLM,
    state: TrainState,
    micro_batches: Sequence[Sequence[Example]],
    features: Mapping[str, SceneFeatures],
    pad_id: int,
    grad_clip: float | None = 1.0,
) -> float:
    """One optimizer update accumulated over ``micro_batches``; returns the mean loss."""
    model.train()
    state.optimizer.zero_grad(set_to_none=True)
    total = 0.0
    for mb in micro_batches:
        batch = collate([e.prompt for e in mb], [e.scene_id for e in mb], pad_id)
        logits = model(batch, features)
        loss = masked_loss(logits, batch.ids, batch.loss_mask)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss.item()} at step {state.step}")
        (loss / len(micro_batches)).backward()
        total += loss.item() / len(micro_batches)
    params = [p for _, p in model.trainable_parameters()]
    if grad_clip:
        torch.nn.utils.clip_grad_norm_(params, grad_clip)
    state.optimizer.step()
    state.step += 1
    state.loss_history.append((state.step, total))
    return total


def train(
    model: SceneLM,
    examples: Sequence[Example],
    features: Mapping[str, SceneFeatures],
    pad_id: int,
    cfg: TrainConfig,
    state: TrainState | None = None,
    on_step: Callable[[TrainState], None] | None = None,
) -> TrainState:
    if not examples:
        raise ValueError("no training examples")
    torch.manual_seed(cfg.seed)
    state = state or init_state(model, cfg)
    while state.step < cfg.steps:
        micro = next_micro_batches(state, len(examples), cfg)
        for group in state.optimizer.param_groups:
            group["lr"] = lr_at(state.step, cfg)
        loss = backward_and_step(model, state, [[examples[i] for i in mb] for mb in micro], features, pad_id, cfg.grad_clip)
        if cfg.log_every and state.step % cfg.log_every == 0:
            log.info("step %d loss %.4f", state.step, loss)
        if on_step is not None:
            on_step(state)
    return state


# ---------------------------------------------------------------------------
# Checkpoints: weights.npz (name -> row-major array) + manifest.json


def build_model(perceiver_cfg: PerceiverConfig, lm_cfg: MicroLMConfig) -> SceneLM:
    return SceneLM(Perceiver(perceiver_cfg), MicroLM(lm_cfg))


def save_checkpoint(path: str | Path, model: SceneLM, vocab: Vocabulary, step: int, extra: Mapping | None = None) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    buf = io.BytesIO()
    np.savez(buf, **state)
    (out / "weights.npz").write_bytes(buf.getvalue())
    vocab.save(out / "vocab.json")
    manifest = {
        "format_version": CHECKPOINT_FORMAT,
        "step": step,
        "perceiver_config": model.perceiver.cfg.to_dict(),
        "lm_config": model.lm.cfg.to_dict(),
        "frozen_hash": frozen_hash(model),
        "tensors": {k: list(v.shape) for k, v in state.items()},
        "merged": all(m.r == 0 for m in model.lm.lora_layers()),
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out


def load_checkpoint(path: str | Path) -> tuple[SceneLM, Vocabulary, dict]:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format_version") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format_version')}")
    pcfg = PerceiverConfig(**manifest["perceiver_config"])
    lcfg_doc = dict(manifest["lm_config"])
    lcfg_doc["lora_targets"] = tuple(lcfg_doc["lora_targets"])
    if manifest.get("merged"):
        lcfg_doc["lora_r"] = 0
        lcfg_doc["lora_targets"] = ()
    lcfg = MicroLMConfig(**lcfg_doc)
    model = build_model(pcfg, lcfg)
    with np.load(root / "weights.npz") as data:
        state = {k: torch.from_numpy(data[k].copy()) for k in data.files}
    model.load_state_dict(state)
    return model, Vocabulary.load(root / "vocab.json"), manifest


def loss_log_csv(history: Sequence[tuple[int, float]]) -> str:
    lines = ["step,loss"]
    lines += [f"{s},{l:.6f}" for s, l in history]
    return "\n".join(lines) + "\n"

