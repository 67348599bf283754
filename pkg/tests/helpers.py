"""Small builders shared by the model and acceptance tests."""

import numpy as np
import torch

from oracles import central_difference
from scenemit.instructions import DatasetConfig, build_dataset, summarize_scene
from scenemit.model import MicroLMConfig, collate, masked_loss
from scenemit.perceiver import PerceiverConfig, featurize_scene
from scenemit.pipeline import vocab_corpus
from scenemit.prompt import build_vocab, default_system_messages
from scenemit.scene import generate_fixture_scene
from scenemit.training import build_model, make_example


def fixture_corpus(n_scenes, quotas, seed=0, objects=6, points=80, val_fraction=0.0):
    scenes = [generate_fixture_scene(s, objects, points)[0] for s in range(seed, seed + n_scenes)]
    summaries = [summarize_scene(s) for s in scenes]
    manifest, samples = build_dataset(summaries, DatasetConfig(quotas, seed=seed, val_fraction=val_fraction))
    return scenes, manifest, samples


def tiny_setup(d_model=16, dtype=torch.float64, n_scenes=2, lora_r=4, seed=0):
    """A small model with a handful of training examples; adapters start non-zero."""
    msgs = default_system_messages()
    scenes, _, samples = fixture_corpus(n_scenes, {"vqa": 3, "grounding": 2, "caption": None}, objects=3, points=30)
    flat = [s for items in samples.values() for s in items]
    vocab = build_vocab(vocab_corpus(flat, msgs))
    pcfg = PerceiverConfig(d_feat=d_model, d_model=d_model, mlp_hidden=d_model, seed=seed)
    lcfg = MicroLMConfig(len(vocab), d_model=d_model, n_layers=2, n_heads=2, d_ff=2 * d_model, lora_r=lora_r, lora_alpha=lora_r, seed=seed)
    model = build_model(pcfg, lcfg).to(dtype)
    feats = {s.scene_id: featurize_scene(s, pcfg) for s in scenes}
    examples = [make_example(s, feats[s.scene_id], vocab, msgs) for s in flat]
    gen = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for layer in model.lm.lora_layers():
            if layer.r:
                layer.lora_B.copy_(torch.randn(layer.lora_B.shape, generator=gen, dtype=dtype) * 0.1)
    return model, examples, feats, vocab


def batch_loss(model, examples, feats, vocab):
    batch = collate([e.prompt for e in examples], [e.scene_id for e in examples], vocab.pad_id)
    return masked_loss(model(batch, feats), batch.ids, batch.loss_mask)


def sample_entries(model, groups, per_group, seed=0):
    """Pick ``per_group`` random entries from every trainable parameter whose name starts with a group prefix."""
    rng = np.random.default_rng(seed)
    picks, seen = [], set()
    for prefix in groups:
        named = [(n, p) for n, p in model.named_parameters() if p.requires_grad and n.startswith(prefix)]
        assert named, prefix
        while len(picks) < per_group * (groups.index(prefix) + 1):
            name, p = named[rng.integers(len(named))]
            i = int(rng.integers(p.numel()))
            if (name, i) not in seen:
                seen.add((name, i))
                picks.append((name, p, i))
    return picks


def fd_check(model, loss_fn, picks, h=1e-4):
    """Relative errors between autograd and central differences for each picked entry."""
    model.eval()
    model.zero_grad()
    loss_fn().backward()
    out = []
    for name, p, i in picks:
        flat = p.detach().view(-1)
        box = flat[i:i + 1].numpy().copy()

        def f():
            with torch.no_grad():
                flat[i] = float(box[0])
                return loss_fn().item()

        orig = box.copy()
        numeric = central_difference(f, box, h)[0]
        with torch.no_grad():
            flat[i] = float(orig[0])
        analytic = p.grad.view(-1)[i].item()
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
        out.append((name, i, analytic, numeric, rel))
    return out
