"""Decoder-only micro language model with low-rank adapters and perceiver feature slots."""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .perceiver import Perceiver, SceneFeatures
from .prompt import PromptSequence, Vocabulary

__all__ = [
    "Batch",
    "LoraLinear",
    "MicroLM",
    "MicroLMConfig",
    "SceneLM",
    "SequenceTooLong",
    "collate",
    "frozen_hash",
    "generate",
    "masked_loss",
    "merge_adapters",
]

LORA_TARGETS = ("q", "k", "v", "o", "ff_in", "ff_out")


class SequenceTooLong(ValueError):
    pass


@dataclass(frozen=True)
class MicroLMConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    max_seq: int = 512
    # At 7B scale the reference recipe uses r=32, alpha=32, dropout=0.1.
    lora_r: int = 8
    lora_alpha: float = 8.0
    lora_dropout: float = 0.1
    lora_targets: tuple[str, ...] = LORA_TARGETS
    train_embeddings: bool = False
    init_std: float | None = None  # None -> 1/sqrt(d_model)
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        unknown = set(self.lora_targets) - set(LORA_TARGETS)
        if unknown:
            raise ValueError(f"unknown LoRA targets {sorted(unknown)}")
        object.__setattr__(self, "lora_targets", tuple(self.lora_targets))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lora_targets"] = list(self.lora_targets)
        return d


class LoraLinear(nn.Module):
    """``y = W x + b + (alpha / r) * B (A dropout(x))`` with ``W`` and ``b`` frozen."""

    def __init__(self, in_features: int, out_features: int, r: int = 0, alpha: float = 1.0, dropout: float = 0.0, std: float = 0.02):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.weight = nn.Parameter(torch.randn(out_features, in_features) * std, requires_grad=False)
        self.bias = nn.Parameter(torch.zeros(out_features), requires_grad=False)
        self.r = r
        self.scaling = alpha / r if r > 0 else 0.0
        self.dropout = nn.Dropout(dropout)
        if r > 0:
            self.lora_A = nn.Parameter(torch.empty(r, in_features))
            nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))
            self.lora_B = nn.Parameter(torch.zeros(out_features, r))
        else:
            self.register_parameter("lora_A", None)
            self.register_parameter("lora_B", None)
        self.adapters_enabled = True

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.linear(x, self.weight, self.bias)
        if self.r > 0 and self.adapters_enabled:
            y = y + self.scaling * F.linear(F.linear(self.dropout(x), self.lora_A), self.lora_B)
        return y

    def merged_weight(self) -> torch.Tensor:
        if self.r == 0:
            return self.weight.detach().clone()
        return (self.weight + self.scaling * self.lora_B @ self.lora_A).detach()

    def extra_repr(self) -> str:
        return f"in={self.in_features}, out={self.out_features}, r={self.r}, scaling={self.scaling}"


def sinusoidal_table(n_pos: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n_pos, dtype=torch.float64)[:, None]
    inv = 10000.0 ** (-torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    table = torch.zeros(n_pos, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * inv)
    table[:, 1::2] = torch.cos(pos * inv)
    return table.float()


class Block(nn.Module):
    def __init__(self, cfg: MicroLMConfig):
        super().__init__()
        d, t = cfg.d_model, set(cfg.lora_targets)

        base_std = cfg.init_std if cfg.init_std is not None else d ** -0.5

        def lin(name, i, o, std=base_std):
            r = cfg.lora_r if name in t else 0
            return LoraLinear(i, o, r, cfg.lora_alpha, cfg.lora_dropout, std)

        out_std = base_std / math.sqrt(2 * cfg.n_layers)
        self.n_heads = cfg.n_heads
        self.ln1 = nn.LayerNorm(d)
        self.q, self.k, self.v = lin("q", d, d), lin("k", d, d), lin("v", d, d)
        self.o = lin("o", d, d, out_std)
        self.ln2 = nn.LayerNorm(d)
        self.ff_in = lin("ff_in", d, cfg.d_ff)
        self.ff_out = lin("ff_out", cfg.d_ff, d, out_std)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        B, T, d = x.shape
        h = self.n_heads
        q = self.q(x).view(B, T, h, d // h).transpose(1, 2)
        k = self.k(x).view(B, T, h, d // h).transpose(1, 2)
        v = self.v(x).view(B, T, h, d // h).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(d // h)
        causal = torch.ones(T, T, dtype=torch.bool, device=x.device).tril()
        scores = scores.masked_fill(~causal, float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        return self.o(out.transpose(1, 2).reshape(B, T, d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attention(self.ln1(x))
        return x + self.ff_out(F.gelu(self.ff_in(self.ln2(x))))


class MicroLM(nn.Module):
    def __init__(self, cfg: MicroLMConfig):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
            nn.init.normal_(self.tok_emb.weight, std=1.0)
            self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
            self.ln_f = nn.LayerNorm(cfg.d_model)
            self.head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
            nn.init.normal_(self.head.weight, std=1.0 / math.sqrt(cfg.d_model))
        self.register_buffer("pos_table", sinusoidal_table(cfg.max_seq, cfg.d_model), persistent=False)
        for name, p in self.named_parameters():
            if "lora_" in name:
                continue
            trainable = cfg.train_embeddings and name in ("tok_emb.weight", "head.weight")
            p.requires_grad_(trainable)

    def lora_layers(self) -> list[LoraLinear]:
        return [m for m in self.modules() if isinstance(m, LoraLinear)]

    def set_adapters(self, enabled: bool) -> None:
        for m in self.lora_layers():
            m.adapters_enabled = enabled

    def forward(self, embeds: torch.Tensor) -> torch.Tensor:
        """Logits ``(B, T, V)`` from input embeddings ``(B, T, d_model)``."""
        T = embeds.shape[1]
        if T > self.cfg.max_seq:
            raise SequenceTooLong(f"sequence length {T} exceeds max_seq {self.cfg.max_seq}")
        x = embeds + self.pos_table[:T].to(embeds.dtype)
        for block in self.blocks:
            x = block(x)
        return self.head(self.ln_f(x))


@dataclass
class Batch:
    ids: torch.Tensor  # (B, T) long
    slots: torch.Tensor  # (B, T) long, -1 on text positions
    loss_mask: torch.Tensor  # (B, T) bool
    scene_ids: list[str] = field(default_factory=list)


def collate(prompts: Sequence[PromptSequence], scene_ids: Sequence[str], pad_id: int) -> Batch:
    T = max(len(p) for p in prompts)
    ids = torch.full((len(prompts), T), pad_id, dtype=torch.long)
    slots = torch.full((len(prompts), T), -1, dtype=torch.long)
    mask = torch.zeros((len(prompts), T), dtype=torch.bool)
    for i, p in enumerate(prompts):
        n = len(p)
        ids[i, :n] = torch.tensor(p.ids)
        slots[i, :n] = torch.tensor(p.slots)
        mask[i, :n] = torch.tensor(p.loss_mask)
    return Batch(ids, slots, mask, list(scene_ids))


class SceneLM(nn.Module):
    """Perceiver plus language model: feature slots take perceiver vectors as input embeddings."""

    def __init__(self, perceiver: Perceiver, lm: MicroLM):
        super().__init__()
        if perceiver.cfg.d_model != lm.cfg.d_model:
            raise ValueError("perceiver output width must equal the LM width")
        self.perceiver = perceiver
        self.lm = lm

    def embed(self, batch: Batch, features: Mapping[str, SceneFeatures]) -> torch.Tensor:
        order = list(dict.fromkeys(batch.scene_ids))
        tables, offsets, off = [], {}, 0
        for sid in order:
            Fs, Fo = self.perceiver(features[sid])
            tables.append(torch.cat([Fs[None], Fo], dim=0))
            offsets[sid] = off
            off += 1 + len(Fo)
        table = torch.cat(tables, dim=0)
        base = torch.tensor([offsets[s] for s in batch.scene_ids], dtype=torch.long)[:, None]
        n_feat = torch.tensor([features[s].n_objects + 1 for s in batch.scene_ids])[:, None]
        if bool((batch.slots >= n_feat).any()):
            raise ValueError("prompt references a feature slot the scene does not provide")
        emb = self.lm.tok_emb(batch.ids).to(table.dtype)
        is_slot = batch.slots >= 0
        gathered = table[(base + batch.slots.clamp(min=0)).clamp(max=len(table) - 1)]
        return torch.where(is_slot[..., None], gathered, emb)

    def forward(self, batch: Batch, features: Mapping[str, SceneFeatures]) -> torch.Tensor:
        return self.lm(self.embed(batch, features))

    def trainable_parameters(self) -> list[tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]


def masked_loss(logits: torch.Tensor, ids: torch.Tensor, loss_mask: torch.Tensor) -> torch.Tensor:
    """Mean next-token cross entropy over positions whose target is in the loss mask."""
    if logits.dim() == 2:
        logits, ids, loss_mask = logits[None], ids[None], loss_mask[None]
    target_mask = loss_mask[:, 1:]
    if not bool(target_mask.any()):
        raise ValueError("loss mask selects no positions")
    logp = torch.log_softmax(logits[:, :-1], dim=-1)
    nll = -logp.gather(-1, ids[:, 1:, None]).squeeze(-1)
    return nll[target_mask].mean()


def frozen_hash(model: nn.Module) -> str:
    """SHA-256 over every frozen parameter (name, shape, bytes)."""
    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters(), key=lambda kv: kv[0]):
        if p.requires_grad:
            continue
        h.update(name.encode())
        h.update(str(tuple(p.shape)).encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def merge_adapters(model: nn.Module) -> nn.Module:
    """Copy of ``model`` with every adapter folded into its base weight and removed."""
    merged = copy.deepcopy(model)
    for m in merged.modules():
        if isinstance(m, LoraLinear) and m.r > 0:
            w = m.merged_weight()
            m.weight.data.copy_(w)
            m.lora_A = None
            m.lora_B = None
            m.r = 0
            m.scaling = 0.0
    return merged


@torch.no_grad()
def generate(
    model: SceneLM,
    prompt: PromptSequence,
    features: SceneFeatures,
    vocab: Vocabulary,
    max_new_tokens: int = 64,
) -> str:
    """Greedy decoding until EOS or the token budget."""
    was_training = model.training
    model.eval()
    try:
        batch = collate([prompt], [features.scene_id], vocab.pad_id)
        emb = model.embed(batch, {features.scene_id: features})
        out: list[int] = []
        for _ in range(max_new_tokens):
            if emb.shape[1] >= model.lm.cfg.max_seq:
                break
            logits = model.lm(emb)[0, -1]
            nxt = int(torch.argmax(logits))
            if nxt == vocab.eos_id:
                break
            out.append(nxt)
            tok = model.lm.tok_emb(torch.tensor([[nxt]])).to(emb.dtype)
            emb = torch.cat([emb, tok], dim=1)
        return vocab.decode(out)
    finally:
        model.train(was_training)


def count_parameters(model: nn.Module, trainable: bool = True) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad == trainable)


def numpy_state(model: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
