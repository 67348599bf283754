"""Command implementations shared by the CLI: ingest, build-dataset, train, evaluate, report."""

from __future__ import annotations

import contextlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch

from .config import RunConfig
from .instructions import TASKS, SceneSummary, build_dataset, load_dataset, summarize_scene
from .metrics import MetricReport, evaluate, format_report_table
from .model import generate, merge_adapters
from .perceiver import SceneFeatures, featurize_scene
from .prompt import OBJECTS_HEADER, SCENE_HEADER, build_vocab
from .scene import SceneParseError, load_scene
from .training import build_model, load_checkpoint, loss_log_csv, make_example, save_checkpoint, train

log = logging.getLogger(__name__)

INCOMPLETE = "INCOMPLETE"
SCENE_SUFFIXES = (".json", ".ply")


@contextlib.contextmanager
def incomplete_marker(out_dir: Path):
    """Leave an ``INCOMPLETE`` file in ``out_dir`` unless the block finishes."""
    out_dir.mkdir(parents=True, exist_ok=True)
    marker = out_dir / INCOMPLETE
    marker.write_text("run did not finish\n")
    yield out_dir
    marker.unlink()


def scene_files(scenes_dir: Path) -> list[Path]:
    return sorted(p for p in Path(scenes_dir).iterdir() if p.suffix.lower() in SCENE_SUFFIXES)


# ---------------------------------------------------------------------------
# ingest


@dataclass
class IngestResult:
    summaries: list[dict]
    errors: list[dict]


def ingest(paths: Iterable[Path], out_dir: Path) -> IngestResult:
    """Parse each scene, write ``summaries.jsonl`` and ``errors.json``."""
    summaries, errors = [], []
    for path in sorted(Path(p) for p in paths):
        try:
            scene = load_scene(path)
        except (SceneParseError, ValueError, OSError) as exc:
            errors.append({"file": path.name, "error": str(exc).replace(str(path), path.name)})
            continue
        record = summarize_scene(scene).to_dict()
        record["source"] = path.name
        record["n_points"] = len(scene)
        summaries.append(record)
    summaries.sort(key=lambda r: r["scene_id"])
    with incomplete_marker(out_dir):
        with open(out_dir / "summaries.jsonl", "w") as fh:
            for rec in summaries:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        (out_dir / "errors.json").write_text(json.dumps(errors, indent=1) + "\n")
    return IngestResult(summaries, errors)


def read_summaries(ingest_dir: Path) -> list[dict]:
    with open(Path(ingest_dir) / "summaries.jsonl") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# build-dataset


def build(cfg: RunConfig) -> dict:
    records = read_summaries(cfg.paths["ingest"])
    summaries = [SceneSummary.from_dict(r) for r in records]
    with incomplete_marker(cfg.paths["dataset"]) as out:
        manifest, _ = build_dataset(summaries, cfg.dataset, out)
    return manifest


def counts_table(manifest: dict) -> str:
    names = {
        "vqa": "VQA",
        "caption": "Scene-level Captioning",
        "conversation": "Conversations",
        "grounding": "Grounding",
        "multiple_choice": "Multiple-choice",
    }
    order = ("vqa", "caption", "conversation", "grounding", "multiple_choice")
    rows = [(names[t], str(manifest["counts"][t])) for t in order]
    rows.append(("All", str(sum(manifest["counts"].values()))))
    w = max(len(r[0]) for r in rows)
    lines = [f"{'Tasks'.ljust(w)}  Count"] + [f"{a.ljust(w)}  {b}" for a, b in rows]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# train / evaluate


def load_features(cfg: RunConfig, scene_ids: Iterable[str]) -> dict[str, SceneFeatures]:
    wanted = set(scene_ids)
    by_id = {r["scene_id"]: r["source"] for r in read_summaries(cfg.paths["ingest"])}
    missing = wanted - set(by_id)
    if missing:
        raise FileNotFoundError(f"scenes not ingested: {sorted(missing)}")
    return {sid: featurize_scene(load_scene(Path(cfg.paths["scenes"]) / by_id[sid]), cfg.perceiver) for sid in sorted(wanted)}


def vocab_corpus(samples: Sequence, system_messages: dict[str, str]) -> list[str]:
    corpus = [SCENE_HEADER, OBJECTS_HEADER, *(system_messages[t] for t in TASKS)]
    for s in samples:
        corpus.append(s.instruction)
        corpus.append(s.answer)
    return corpus


def run_train(cfg: RunConfig, out_dir: Path | None = None) -> dict:
    out = Path(out_dir or cfg.paths["checkpoints"])
    manifest, samples = load_dataset(cfg.paths["dataset"])
    train_samples = [s for t in TASKS for s in samples[t] if manifest["splits"][s.sample_id] == "train"]
    if not train_samples:
        raise ValueError("dataset has no training samples")
    vocab = build_vocab(vocab_corpus(train_samples, cfg.system_messages))
    feats = load_features(cfg, {s.scene_id for s in train_samples})
    examples = [make_example(s, feats[s.scene_id], vocab, cfg.system_messages) for s in train_samples]
    model = build_model(cfg.perceiver, cfg.lm_config(len(vocab)))

    with incomplete_marker(out):
        every = cfg.train.checkpoint_every

        def on_step(state):
            if every and state.step % every == 0 and state.step < cfg.train.steps:
                save_checkpoint(out / f"step_{state.step:05d}", model, vocab, state.step)

        state = train(model, examples, feats, vocab.pad_id, cfg.train, on_step=on_step)
        (out / "loss.csv").write_text(loss_log_csv(state.loss_history))
        save_checkpoint(out / "final", model, vocab, state.step)
        save_checkpoint(out / "merged", merge_adapters(model), vocab, state.step)
    return {"steps": state.step, "final_loss": state.loss_history[-1][1] if state.loss_history else None, "vocab_size": len(vocab)}


def predict(model, vocab, samples, feats, system_messages, max_new_tokens: int) -> dict[str, str]:
    preds = {}
    for s in samples:
        ex = make_example(s, feats[s.scene_id], vocab, system_messages, with_answer=False)
        preds[s.sample_id] = generate(model, ex.prompt, feats[s.scene_id], vocab, max_new_tokens)
    return preds


def run_evaluate(cfg: RunConfig, checkpoint: Path, split: str | None = None, out_dir: Path | None = None) -> MetricReport:
    split = split or cfg.eval["split"]
    out = Path(out_dir or cfg.paths["reports"])
    model, vocab, _ = load_checkpoint(checkpoint)
    model.eval()
    manifest, samples = load_dataset(cfg.paths["dataset"])
    chosen = [s for t in TASKS for s in samples[t] if manifest["splits"].get(s.sample_id) == split]
    chosen.sort(key=lambda s: s.sample_id)
    feats = load_features(cfg, {s.scene_id for s in chosen})
    with incomplete_marker(out):
        with torch.no_grad():
            preds = predict(model, vocab, chosen, feats, cfg.system_messages, int(cfg.eval["max_new_tokens"]))
        with open(out / "predictions.jsonl", "w") as fh:
            for sid in sorted(preds):
                fh.write(json.dumps({"sample_id": sid, "prediction": preds[sid]}, ensure_ascii=False) + "\n")
        report = evaluate(preds, chosen)
        doc = report.to_dict()
        doc["split"] = split
        (out / "report.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        (out / "report.txt").write_text(format_report_table({"scenemit": report}))
    return report


def read_predictions(path: Path) -> dict[str, str]:
    with open(path) as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    return {r["sample_id"]: r["prediction"] for r in rows}


def combine_reports(paths: Sequence[Path]) -> str:
    reports = {}
    for p in paths:
        p = Path(p)
        path = p / "report.json" if p.is_dir() else p
        name = path.parent.name if path.name == "report.json" else path.stem
        reports[name] = MetricReport.from_dict(json.loads(path.read_text()))
    return format_report_table(reports)
