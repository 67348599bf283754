"""Template-driven instruction data for the five task families.

Every generator is a pure function of the scene summary and a seed. Random
streams are keyed on ``(seed, crc32(scene_id))`` so that results do not depend
on process hashing or on the order in which scenes are visited.
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .prompt import format_grounding_answer
from .scene import PALETTE, BBox3D, ScenePointCloud, bbox_of, compute_attributes, segment_objects

log = logging.getLogger(__name__)

TASKS = ("vqa", "caption", "grounding", "multiple_choice", "conversation")
LETTERS = ("A", "B", "C", "D")
LOCATE_CLAUSE = "and locate its position with the coordinate of center x, y, z and its length, width and height."

# Reference corpus sizes per task; conversations have no reported count.
REFERENCE_COUNTS = {"vqa": 25563, "grounding": 36665, "multiple_choice": 11895, "caption": 562}

_PALETTE_RGB = np.array([rgb for _, _, rgb in PALETTE], dtype=np.float64) / 255.0
COLOR_NAMES = tuple(sorted({name for _, name, _ in PALETTE}))
CLASS_NAMES = tuple(name for name, _, _ in PALETTE)


def color_name(rgb) -> str:
    """Name of the nearest palette color."""
    d = np.sum((_PALETTE_RGB - np.asarray(rgb, dtype=np.float64)) ** 2, axis=1)
    return PALETTE[int(np.argmin(d))][1]


def plural(noun: str) -> str:
    if noun.endswith("shelf"):
        return noun[:-1] + "ves"
    if noun.endswith(("s", "x", "ch", "sh")):
        return noun + "es"
    return noun + "s"


@dataclass(frozen=True)
class SceneObject:
    object_id: int
    class_name: str
    color: str
    box: BBox3D


@dataclass(frozen=True)
class SceneSummary:
    """Per-scene ground truth used by the generators."""

    scene_id: str
    objects: tuple[SceneObject, ...]

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "objects": [
                {
                    "object_id": o.object_id,
                    "class_name": o.class_name,
                    "color": o.color,
                    "center": list(o.box.center),
                    "size": list(o.box.extents),
                }
                for o in self.objects
            ],
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "SceneSummary":
        objs = tuple(
            SceneObject(int(o["object_id"]), o["class_name"], o["color"], BBox3D(tuple(o["center"]), tuple(o["size"])))
            for o in doc["objects"]
        )
        return cls(doc["scene_id"], objs)

    def count(self, class_name: str) -> int:
        return sum(o.class_name == class_name for o in self.objects)

    @property
    def classes(self) -> list[str]:
        return sorted({o.class_name for o in self.objects})


def summarize_scene(scene: ScenePointCloud) -> SceneSummary:
    objs = []
    for seg in segment_objects(scene):
        attrs = compute_attributes(seg)
        objs.append(SceneObject(seg.object_id, seg.class_name, color_name(attrs.mean_color), bbox_of(attrs)))
    return SceneSummary(scene.scene_id, tuple(objs))


@dataclass(frozen=True)
class InstructionSample:
    sample_id: str
    scene_id: str
    task: str
    instruction: str
    answer: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "grounding" and "box" not in self.meta:
            raise ValueError("grounding samples need a gt box")
        if self.task == "multiple_choice":
            if len(self.meta.get("options", ())) != 4 or self.meta.get("gt_letter") not in LETTERS:
                raise ValueError("multiple-choice samples need 4 options and a gt letter")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "InstructionSample":
        return cls(**{k: doc[k] for k in ("sample_id", "scene_id", "task", "instruction", "answer")}, meta=dict(doc.get("meta", {})))

    @property
    def gt_box(self) -> BBox3D | None:
        return BBox3D.from_list(self.meta["box"]) if "box" in self.meta else None


def _rng(seed: int, scene_id: str, stream: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(scene_id.encode()), zlib.crc32(stream.encode())])


def _dist(a: SceneObject, b: SceneObject) -> float:
    return float(np.linalg.norm(np.subtract(a.box.center, b.box.center)))


def _nearest(gt: SceneSummary, target: SceneObject) -> SceneObject | None:
    others = sorted((o for o in gt.objects if o.object_id != target.object_id), key=lambda o: (_dist(o, target), o.object_id))
    if not others:
        return None
    if len(others) > 1 and abs(_dist(others[0], target) - _dist(others[1], target)) < 1e-6:
        return None
    return others[0]


# ---------------------------------------------------------------------------
# VQA


def vqa_candidates(gt: SceneSummary) -> list[tuple[str, str, str]]:
    """All templated ``(kind, question, answer)`` triples for a scene, deduplicated."""
    out: list[tuple[str, str, str]] = []
    unique = [o for o in gt.objects if gt.count(o.class_name) == 1]
    for o in unique:
        out.append(("color", f"What color is the {o.class_name}?", o.color))
    for name in CLASS_NAMES:
        out.append(("count", f"How many {plural(name)} are in the room?", str(gt.count(name))))
    for name in CLASS_NAMES:
        out.append(("yesno", f"Is there a {name} in the room?", "yes" if gt.count(name) else "no"))
    for o in unique:
        near = _nearest(gt, o)
        if near is not None and near.class_name != o.class_name:
            out.append(("class", f"What is the closest object to the {o.class_name}?", near.class_name))
            out.append(("color", f"What color is the object closest to the {o.class_name}?", near.color))
    for a in unique:
        for b in unique:
            if a is b:
                continue
            dx = a.box.center[0] - b.box.center[0]
            if abs(dx) >= 0.05:
                out.append(("yesno", f"Is the {a.class_name} to the left of the {b.class_name}?", "yes" if dx < 0 else "no"))
    if gt.objects:
        top = lambda o: o.box.center[2] + o.box.extents[2] / 2  # noqa: E731
        by_height = sorted(gt.objects, key=lambda o: -top(o))
        if len(by_height) == 1 or top(by_height[0]) - top(by_height[1]) > 1e-6:
            out.append(("class", "What is the tallest object in the room?", by_height[0].class_name))
    for color in COLOR_NAMES:
        holders = [o for o in gt.objects if o.color == color]
        if len({o.class_name for o in holders}) == 1 and len(holders) >= 1:
            out.append(("class", f"What is the {color} object?", holders[0].class_name))
    seen: set[str] = set()
    deduped = []
    for kind, q, a in out:
        if q not in seen:
            seen.add(q)
            deduped.append((kind, q, a))
    return deduped


def make_vqa(gt: SceneSummary, seed: int, quota: int | None = None) -> list[InstructionSample]:
    if not gt.objects:
        raise ValueError("VQA needs a scene with at least one object")
    cands = vqa_candidates(gt)
    order = _rng(seed, gt.scene_id, "vqa").permutation(len(cands))
    if quota is not None and quota > len(cands):
        log.warning("scene %s: VQA quota %d exceeds %d unique questions", gt.scene_id, quota, len(cands))
    picked = [cands[i] for i in order[: quota if quota is not None else len(cands)]]
    return [
        InstructionSample(f"{gt.scene_id}_vqa_{i:04d}", gt.scene_id, "vqa", q, a, {"kind": kind})
        for i, (kind, q, a) in enumerate(picked)
    ]


# ---------------------------------------------------------------------------
# Captioning


def make_caption(gt: SceneSummary) -> InstructionSample:
    if not gt.objects:
        text = "an empty room"
    else:
        parts = [f"{gt.count(c)} {plural(c) if gt.count(c) > 1 else c}" for c in gt.classes]
        listing = parts[0] if len(parts) == 1 else ", ".join(parts[:-1]) + " and " + parts[-1]
        text = f"The room contains {listing}."
    return InstructionSample(f"{gt.scene_id}_caption_0000", gt.scene_id, "caption", "Describe the scene.", text, {})


# ---------------------------------------------------------------------------
# Grounding


def describe_object(gt: SceneSummary, target: SceneObject) -> str | None:
    """``the <color> <class>`` plus one relational cue that singles the target out, or None."""
    base = f"the {target.color} {target.class_name}"
    twins = [o for o in gt.objects if o.class_name == target.class_name and o.color == target.color and o.object_id != target.object_id]
    refs = sorted(
        (o for o in gt.objects if o.class_name != target.class_name and gt.count(o.class_name) == 1),
        key=lambda o: (_dist(o, target), o.object_id),
    )
    if not twins:
        near = _nearest(gt, target)
        if near is None:
            return base
        return f"{base} next to the {near.class_name}"
    for ref in refs:
        d = _dist(ref, target)
        if all(_dist(ref, t) - d > 1e-6 for t in twins):
            return f"{base} closer to the {ref.class_name}"
    return None


_GROUNDING_VERBS = ("Find", "Look for", "Identify")


def grounding_candidates(gt: SceneSummary) -> list[tuple[SceneObject, str]]:
    out = []
    for verb in _GROUNDING_VERBS:
        for obj in gt.objects:
            desc = describe_object(gt, obj)
            if desc is not None:
                out.append((obj, f"{verb} {desc} {LOCATE_CLAUSE}"))
    return out


def make_grounding(gt: SceneSummary, seed: int, quota: int | None = None) -> list[InstructionSample]:
    if not gt.objects:
        raise ValueError("grounding needs a scene with at least one object")
    cands = grounding_candidates(gt)
    order = _rng(seed, gt.scene_id, "grounding").permutation(len(cands))
    if quota is not None and quota > len(cands):
        log.warning("scene %s: grounding quota %d exceeds %d candidates", gt.scene_id, quota, len(cands))
    samples = []
    for i, k in enumerate(order[: quota if quota is not None else len(cands)]):
        obj, instr = cands[k]
        samples.append(
            InstructionSample(
                f"{gt.scene_id}_grounding_{i:04d}",
                gt.scene_id,
                "grounding",
                instr,
                format_grounding_answer(obj.object_id, obj.box),
                {"object_id": obj.object_id, "box": obj.box.to_list()},
            )
        )
    return samples


# ---------------------------------------------------------------------------
# Multiple choice


def _distractor_pool(kind: str, answer: str, scene_classes: Sequence[str]) -> list[str]:
    if kind == "color":
        pool = list(COLOR_NAMES)
    elif kind == "count":
        n = int(answer)
        pool = [str(v) for v in (n - 2, n - 1, n + 1, n + 2) if v >= 0]
    elif kind == "class":
        pool = list(scene_classes)
    else:
        pool = []
    return sorted(set(pool) - {answer})


def make_multiple_choice(
    vqa_samples: Iterable[InstructionSample],
    seed: int,
    scene_classes: Mapping[str, Sequence[str]] | None = None,
) -> list[InstructionSample]:
    """Four-way questions built from VQA pairs with type-consistent distractors."""
    out = []
    for src in vqa_samples:
        kind = src.meta.get("kind")
        classes = scene_classes.get(src.scene_id, CLASS_NAMES) if scene_classes is not None else CLASS_NAMES
        pool = _distractor_pool(kind, src.answer, classes)
        if len(pool) < 3:
            log.debug("skipping %s: only %d distractors", src.sample_id, len(pool))
            continue
        rng = _rng(seed, src.sample_id, "mc")
        picks = [pool[i] for i in sorted(rng.choice(len(pool), size=3, replace=False))]
        gt_pos = int(rng.integers(4))
        options = picks[:gt_pos] + [src.answer] + picks[gt_pos:]
        listing = " ".join(f"{letter}. {opt}" for letter, opt in zip(LETTERS, options))
        out.append(
            InstructionSample(
                src.sample_id.replace("_vqa_", "_mc_"),
                src.scene_id,
                "multiple_choice",
                f"{src.instruction} Options: {listing}",
                LETTERS[gt_pos],
                {"options": options, "gt_letter": LETTERS[gt_pos], "source": src.sample_id},
            )
        )
    return out


# ---------------------------------------------------------------------------
# Conversations


def make_conversation(gt: SceneSummary, seed: int, n_turns: int = 2, n_conversations: int | None = None) -> list[InstructionSample]:
    """Chains of ``n_turns`` VQA turns; each instruction carries the earlier Q/A transcript."""
    if n_turns < 2:
        raise ValueError("a conversation needs at least two turns")
    cands = vqa_candidates(gt)
    order = _rng(seed, gt.scene_id, "conversation").permutation(len(cands))
    n_conv = len(cands) // n_turns
    if n_conversations is not None:
        n_conv = min(n_conv, n_conversations)
    out = []
    for c in range(n_conv):
        conv_id = f"{gt.scene_id}_conv_{c:03d}"
        history: list[str] = []
        for t in range(n_turns):
            kind, q, a = cands[order[c * n_turns + t]]
            instr = " ".join(history + [f"Q: {q}"]) if history else q
            out.append(
                InstructionSample(
                    f"{conv_id}_turn_{t}",
                    gt.scene_id,
                    "conversation",
                    instr,
                    a,
                    {"conversation_id": conv_id, "turn": t, "question": q, "kind": kind},
                )
            )
            history.append(f"Q: {q} A: {a}")
    return out


# ---------------------------------------------------------------------------
# Dataset assembly


def proportional_quotas(total: int) -> dict[str, int]:
    """Split ``total`` across tasks in reference-corpus proportions (largest remainder)."""
    denom = sum(REFERENCE_COUNTS.values())
    raw = {t: total * c / denom for t, c in REFERENCE_COUNTS.items()}
    quotas = {t: int(np.floor(v)) for t, v in raw.items()}
    short = total - sum(quotas.values())
    for t in sorted(raw, key=lambda t: (-(raw[t] - quotas[t]), t))[:short]:
        quotas[t] += 1
    quotas["conversation"] = 0
    return quotas


@dataclass
class DatasetConfig:
    quotas: dict[str, int | None] = field(
        default_factory=lambda: {"vqa": 100, "grounding": 100, "multiple_choice": 50, "caption": None, "conversation": 20}
    )
    seed: int = 0
    val_fraction: float = 0.2
    n_turns: int = 2
    proportional_total: int | None = None

    def resolved_quotas(self, n_scenes: int) -> dict[str, int]:
        if self.proportional_total is not None:
            return proportional_quotas(self.proportional_total)
        q = {t: self.quotas.get(t, 0) for t in TASKS}
        if q["caption"] is None:
            q["caption"] = n_scenes
        return {t: int(v or 0) for t, v in q.items()}


def _round_robin(pools: list[list], quota: int) -> list:
    out, cursors = [], [0] * len(pools)
    while len(out) < quota:
        progressed = False
        for i, pool in enumerate(pools):
            if len(out) >= quota:
                break
            if cursors[i] < len(pool):
                out.append(pool[cursors[i]])
                cursors[i] += 1
                progressed = True
        if not progressed:
            break
    return out


def _renumber(samples: list[InstructionSample], task: str) -> list[InstructionSample]:
    counters: dict[str, int] = {}
    out = []
    for s in samples:
        if task == "conversation":
            out.append(s)
            continue
        k = counters.get(s.scene_id, 0)
        counters[s.scene_id] = k + 1
        out.append(InstructionSample(f"{s.scene_id}_{task}_{k:04d}", s.scene_id, task, s.instruction, s.answer, s.meta))
    return sorted(out, key=lambda s: (s.scene_id, s.sample_id))


def split_scenes(scene_ids: Sequence[str], val_fraction: float, seed: int) -> tuple[list[str], list[str]]:
    ids = sorted(scene_ids)
    n_val = int(round(val_fraction * len(ids))) if len(ids) > 1 else 0
    n_val = min(max(n_val, 1 if val_fraction > 0 and len(ids) > 1 else 0), len(ids) - 1) if ids else 0
    perm = np.random.default_rng([seed, 0x5EED]).permutation(len(ids))
    val = sorted(ids[i] for i in perm[:n_val])
    train = sorted(set(ids) - set(val))
    return train, val


def generate_samples(summaries: Sequence[SceneSummary], config: DatasetConfig) -> tuple[dict[str, list[InstructionSample]], dict[str, int], list[str]]:
    """Per-task samples honoring quotas; returns ``(samples, quotas, truncated_tasks)``."""
    if not summaries:
        raise ValueError("need at least one scene")
    scenes = sorted(summaries, key=lambda s: s.scene_id)
    quotas = config.resolved_quotas(len(scenes))
    seed = config.seed
    with_objects = [s for s in scenes if s.objects]
    vqa_pools = {s.scene_id: make_vqa(s, seed) for s in with_objects}
    classes = {s.scene_id: s.classes for s in scenes}
    pools = {
        "vqa": [vqa_pools[s.scene_id] for s in with_objects],
        "grounding": [make_grounding(s, seed) for s in with_objects],
        "multiple_choice": [make_multiple_choice(vqa_pools[s.scene_id], seed, classes) for s in with_objects],
        "caption": [[make_caption(s)] for s in scenes],
    }
    samples: dict[str, list[InstructionSample]] = {}
    truncated = []
    for task, task_pools in pools.items():
        picked = _round_robin(task_pools, quotas[task])
        if len(picked) < quotas[task]:
            truncated.append(task)
        samples[task] = _renumber(picked, task)
    conv_pools = []
    for s in with_objects:
        turns = make_conversation(s, seed, config.n_turns)
        conv_pools.append([turns[i:i + config.n_turns] for i in range(0, len(turns), config.n_turns)])
    convs = _round_robin(conv_pools, -(-quotas["conversation"] // config.n_turns))
    flat = [t for conv in convs for t in conv][: quotas["conversation"]]
    if len(flat) < quotas["conversation"]:
        truncated.append("conversation")
    samples["conversation"] = sorted(flat, key=lambda s: (s.scene_id, s.sample_id))
    return {t: samples[t] for t in TASKS}, quotas, sorted(truncated)


def build_dataset(
    summaries: Sequence[SceneSummary], config: DatasetConfig, out_dir: str | Path | None = None
) -> tuple[dict, dict[str, list[InstructionSample]]]:
    """Generate all tasks, assign scene-level splits, and optionally write JSONL plus ``manifest.json``."""
    samples, quotas, truncated = generate_samples(summaries, config)
    train_scenes, val_scenes = split_scenes([s.scene_id for s in summaries], config.val_fraction, config.seed)
    val_set = set(val_scenes)
    splits = {}
    split_counts = {"train": {t: 0 for t in TASKS}, "val": {t: 0 for t in TASKS}}
    for task, items in samples.items():
        for s in items:
            split = "val" if s.scene_id in val_set else "train"
            splits[s.sample_id] = split
            split_counts[split][task] += 1
    manifest = {
        "seed": config.seed,
        "quotas": quotas,
        "counts": {t: len(samples[t]) for t in TASKS},
        "split_counts": split_counts,
        "train_scenes": train_scenes,
        "val_scenes": val_scenes,
        "truncated": truncated,
        "files": {t: f"{t}.jsonl" for t in TASKS},
        "splits": splits,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for task, items in samples.items():
            write_jsonl(out / f"{task}.jsonl", items)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest, samples


def write_jsonl(path: str | Path, samples: Iterable[InstructionSample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")


def read_jsonl(path: str | Path) -> list[InstructionSample]:
    with open(path, encoding="utf-8") as fh:
        return [InstructionSample.from_dict(json.loads(line)) for line in fh if line.strip()]


def load_dataset(dataset_dir: str | Path) -> tuple[dict, dict[str, list[InstructionSample]]]:
    root = Path(dataset_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    samples = {t: read_jsonl(root / name) for t, name in manifest["files"].items()}
    return manifest, samples
