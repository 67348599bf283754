import json
from collections import Counter

import pytest

from scenemit.instructions import (
    LOCATE_CLAUSE,
    DatasetConfig,
    InstructionSample,
    SceneObject,
    SceneSummary,
    build_dataset,
    color_name,
    describe_object,
    load_dataset,
    make_caption,
    make_conversation,
    make_grounding,
    make_multiple_choice,
    make_vqa,
    proportional_quotas,
    split_scenes,
    summarize_scene,
)
from scenemit.metrics import iou_3d
from scenemit.prompt import parse_grounding_answer
from scenemit.scene import PALETTE, BBox3D, generate_fixture_scene


def obj(i, name, color, center, size=(0.5, 0.5, 0.5)):
    return SceneObject(i, name, color, BBox3D(center, size))


def summary(*objs, sid="s0"):
    return SceneSummary(sid, tuple(objs))


@pytest.fixture(scope="module")
def summaries():
    return [summarize_scene(generate_fixture_scene(seed, 8, 60)[0]) for seed in range(10)]


def test_palette_colors_named_back():
    for _, name, rgb in PALETTE:
        assert color_name([v / 255 for v in rgb]) == name


def test_vqa_color_example():
    gt = summary(obj(0, "chair", "red", (1, 1, 0.5)))
    pairs = {(s.instruction, s.answer) for s in make_vqa(gt, 0)}
    assert ("What color is the chair?", "red") in pairs


def test_vqa_count_example():
    gt = summary(*(obj(i, "chair", "red", (i * 2.0, 0, 0.25)) for i in range(3)))
    pairs = {(s.instruction, s.answer) for s in make_vqa(gt, 0)}
    assert ("How many chairs are in the room?", "3") in pairs
    assert ("How many tables are in the room?", "0") in pairs


def test_vqa_left_of_uses_centers():
    gt = summary(obj(0, "chair", "red", (1, 0, 0)), obj(1, "table", "brown", (3, 0, 0)))
    pairs = dict((s.instruction, s.answer) for s in make_vqa(gt, 0))
    assert pairs["Is the chair to the left of the table?"] == "yes"
    assert pairs["Is the table to the left of the chair?"] == "no"
    assert pairs["What is the closest object to the chair?"] == "table"


def test_vqa_quota_and_unique_questions(summaries):
    samples = make_vqa(summaries[0], 0, quota=5)
    assert len(samples) == 5
    full = make_vqa(summaries[0], 0)
    assert len({s.instruction for s in full}) == len(full)
    with pytest.raises(ValueError):
        make_vqa(summary(), 0)


def test_caption_examples():
    gt = summary(obj(0, "chair", "red", (0, 0, 0)), obj(1, "chair", "red", (2, 0, 0)), obj(2, "table", "brown", (4, 0, 0)))
    text = make_caption(gt).answer
    assert "2 chairs" in text and "1 table" in text
    assert make_caption(summary()).answer == "an empty room"


def test_grounding_answer_example():
    gt = summary(obj(3, "chair", "red", (1, 1, 0.5), (0.5, 0.5, 1)), obj(4, "table", "brown", (3, 3, 0.5)))
    s = next(x for x in make_grounding(gt, 0) if x.meta["object_id"] == 3)
    assert s.answer == "obj_3 [1.00, 1.00, 0.50, 0.50, 0.50, 1.00]"
    assert s.instruction.endswith(LOCATE_CLAUSE)
    assert "the red chair next to the table" in s.instruction
    oid, box = parse_grounding_answer(s.answer)
    assert oid == 3 and iou_3d(box, s.gt_box) == 1.0


def test_twin_objects_get_distinguishing_cue():
    gt = summary(
        obj(0, "chair", "red", (1, 0, 0.5)),
        obj(1, "chair", "red", (5, 0, 0.5)),
        obj(2, "table", "brown", (2, 0, 0.5)),
        obj(3, "sofa", "blue", (7, 0, 0.5)),
    )
    assert describe_object(gt, gt.objects[0]) == "the red chair closer to the table"
    assert describe_object(gt, gt.objects[1]) == "the red chair closer to the sofa"


def test_indistinguishable_twins_skipped():
    gt = summary(obj(0, "chair", "red", (0, 0, 0)), obj(1, "chair", "red", (2, 0, 0)))
    assert describe_object(gt, gt.objects[0]) is None
    assert make_grounding(gt, 0) == []


def test_fixture_grounding_roundtrip(summaries):
    for gt in summaries:
        for s in make_grounding(gt, 0):
            oid, box = parse_grounding_answer(s.answer)
            assert oid == s.meta["object_id"]
            assert iou_3d(box, s.gt_box) >= 0.99


def test_multiple_choice_construction(summaries):
    vqa = [s for gt in summaries for s in make_vqa(gt, 0)]
    mc = make_multiple_choice(vqa, 0, {gt.scene_id: gt.classes for gt in summaries})
    assert mc
    src = {s.sample_id: s for s in vqa}
    for m in mc:
        opts = m.meta["options"]
        assert len(opts) == 4 and len(set(opts)) == 4
        gt_answer = src[m.meta["source"]].answer
        assert opts.count(gt_answer) == 1
        assert opts["ABCD".index(m.answer)] == gt_answer
        assert m.answer == m.meta["gt_letter"]


def test_multiple_choice_color_distractors():
    base = InstructionSample("s_vqa_0000", "s", "vqa", "What color is the chair?", "red", {"kind": "color"})
    m = make_multiple_choice([base], 0)[0]
    colors = {name for _, name, _ in PALETTE}
    assert set(m.meta["options"]) <= colors and "red" in m.meta["options"]


def test_multiple_choice_skips_small_pools():
    base = InstructionSample("s_vqa_0000", "s", "vqa", "Is there a chair in the room?", "yes", {"kind": "yesno"})
    assert make_multiple_choice([base], 0) == []


def test_gt_letter_uniform():
    scenes = [summarize_scene(generate_fixture_scene(s, 8, 20)[0]) for s in range(40)]
    vqa = [s for gt in scenes for s in make_vqa(gt, 0)]
    mc = make_multiple_choice(vqa, 0, {gt.scene_id: gt.classes for gt in scenes})[:1000]
    assert len(mc) == 1000
    freq = Counter(m.answer for m in mc)
    assert all(0.20 <= freq[letter] / 1000 <= 0.30 for letter in "ABCD"), freq


def test_conversation_chain(summaries):
    conv = make_conversation(summaries[0], 0, n_turns=2)
    first, second = conv[0], conv[1]
    assert first.meta["conversation_id"] == second.meta["conversation_id"]
    assert first.meta["question"] in second.instruction and first.answer in second.instruction
    assert second.instruction.endswith(second.meta["question"])
    assert {s.scene_id for s in conv} == {summaries[0].scene_id}
    assert conv == make_conversation(summaries[0], 0, n_turns=2)
    with pytest.raises(ValueError):
        make_conversation(summaries[0], 0, n_turns=1)


def test_build_dataset_counts_and_split(tmp_path, summaries):
    cfg = DatasetConfig({"vqa": 100, "grounding": 100, "multiple_choice": 50, "caption": None, "conversation": 20}, seed=0)
    manifest, samples = build_dataset(summaries, cfg, tmp_path)
    assert manifest["counts"] == {"vqa": 100, "caption": 10, "grounding": 100, "multiple_choice": 50, "conversation": 20}
    assert manifest["truncated"] == []
    for task, items in samples.items():
        lines = (tmp_path / f"{task}.jsonl").read_text().splitlines()
        assert len(lines) == manifest["counts"][task] == len(items)
    assert not set(manifest["train_scenes"]) & set(manifest["val_scenes"])
    assert manifest["val_scenes"]
    val = set(manifest["val_scenes"])
    for items in samples.values():
        for s in items:
            assert manifest["splits"][s.sample_id] == ("val" if s.scene_id in val else "train")
    ids = [s.sample_id for items in samples.values() for s in items]
    assert len(ids) == len(set(ids))
    m2, s2 = load_dataset(tmp_path)
    assert m2 == json.loads(json.dumps(manifest)) and s2 == samples


def test_build_dataset_deterministic(tmp_path, summaries):
    cfg = DatasetConfig(seed=3)
    build_dataset(summaries, cfg, tmp_path / "a")
    build_dataset(list(reversed(summaries)), cfg, tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_truncation_flagged(summaries):
    manifest, _ = build_dataset(summaries[:1], DatasetConfig({"grounding": 10_000}, seed=0))
    assert manifest["truncated"] == ["grounding"]


def test_proportional_quotas_reference_total():
    # 300 * (25563, 36665, 11895, 562) / 74685, largest remainder
    assert proportional_quotas(300) == {"vqa": 103, "grounding": 147, "multiple_choice": 48, "caption": 2, "conversation": 0}
    assert sum(proportional_quotas(1234).values()) == 1234


def test_split_scenes_disjoint_and_stable():
    ids = [f"scene{i:04d}" for i in range(10)]
    train, val = split_scenes(ids, 0.2, 0)
    assert len(val) == 2 and not set(train) & set(val) and set(train) | set(val) == set(ids)
    assert split_scenes(list(reversed(ids)), 0.2, 0) == (train, val)
    assert split_scenes(ids, 0.0, 0) == (ids, [])


def test_sample_validation():
    with pytest.raises(ValueError):
        InstructionSample("x", "s", "poetry", "q", "a")
    with pytest.raises(ValueError):
        InstructionSample("x", "s", "grounding", "q", "a")
    with pytest.raises(ValueError):
        InstructionSample("x", "s", "multiple_choice", "q", "A", {"options": ["a", "b"], "gt_letter": "A"})
