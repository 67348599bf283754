import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenemit.metrics import iou_3d
from scenemit.scene import (
    BBox3D,
    ObjectAttributes,
    SceneParseError,
    ScenePointCloud,
    SegmentedObject,
    bbox_of,
    compute_attributes,
    generate_fixture_scene,
    load_scene,
    save_scene,
    segment_objects,
)


def write_json(tmp_path, doc, name="s.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


def test_load_single_point_json(tmp_path):
    scene = load_scene(write_json(tmp_path, {"points": [[0, 0, 0, 255, 0, 0]], "labels": [0]}), "json")
    assert len(scene) == 1
    np.testing.assert_array_equal(scene.rgb[0], [1.0, 0.0, 0.0])
    assert scene.scene_id == "s"


def test_color_out_of_range_names_record(tmp_path):
    doc = {"points": [[0, 0, 0, 1, 2, 3], [1, 1, 1, 300, 0, 0]], "labels": [0, 0]}
    with pytest.raises(SceneParseError) as err:
        load_scene(write_json(tmp_path, doc))
    assert err.value.location.endswith("points[1]")


@pytest.mark.parametrize(
    "doc",
    [
        {"points": []},
        {"points": [[0, 0, "x", 1, 1, 1]], "labels": [0]},
        {"points": [[0, 0, 0, 1, 1]], "labels": [0]},
        {"points": [[0, 0, 0, 1, 1, 1]], "labels": [0, 1]},
        {"labels": [0]},
    ],
)
def test_malformed_json_raises(tmp_path, doc):
    with pytest.raises(SceneParseError):
        load_scene(write_json(tmp_path, doc))


def test_invalid_json_syntax(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{\n  \"points\": [\n  oops")
    with pytest.raises(SceneParseError, match="bad.json:3"):
        load_scene(p)


PLY = """ply
format ascii 1.0
comment class 0 chair
element vertex 2
property float x
property float y
property float z
property uchar red
property uchar green
property uchar blue
property int object_id
end_header
0 0 0 255 0 0 0
1 2 {z} 0 255 0 0
"""


def test_load_ply(tmp_path):
    p = tmp_path / "room.ply"
    p.write_text(PLY.format(z=3))
    scene = load_scene(p)
    assert scene.classes == {0: "chair"}
    np.testing.assert_array_equal(scene.xyz[1], [1, 2, 3])
    np.testing.assert_array_equal(scene.rgb[1], [0, 1, 0])


def test_ply_non_numeric_names_line(tmp_path):
    p = tmp_path / "room.ply"
    p.write_text(PLY.format(z="abc"))
    with pytest.raises(SceneParseError) as err:
        load_scene(p)
    assert err.value.location.endswith(":14")


def test_ply_bad_header(tmp_path):
    p = tmp_path / "room.ply"
    p.write_text(PLY.format(z=0).replace("format ascii 1.0", "format binary_little_endian 1.0"))
    with pytest.raises(SceneParseError, match=":2"):
        load_scene(p)
    p.write_text(PLY.format(z=0).replace("property int object_id\n", ""))
    with pytest.raises(SceneParseError, match="object_id"):
        load_scene(p)


@pytest.mark.parametrize("suffix", ["json", "ply"])
def test_save_load_roundtrip(tmp_path, suffix):
    scene, _ = generate_fixture_scene(3, 5, 30)
    back = load_scene(save_scene(scene, tmp_path / f"x.{suffix}"))
    assert back.scene_id == scene.scene_id
    assert back.classes == scene.classes
    np.testing.assert_array_equal(back.labels, scene.labels)
    np.testing.assert_array_equal(back.xyz, scene.xyz)
    np.testing.assert_allclose(back.rgb, scene.rgb, atol=0.5 / 255)


def test_cloud_is_immutable():
    scene, _ = generate_fixture_scene(0, 1, 2)
    with pytest.raises(ValueError):
        scene.points[0, 0] = 5.0


def test_segment_partition_examples():
    pts = np.zeros((3, 6))
    objs = segment_objects(ScenePointCloud("s", pts, [0, 0, 1]))
    assert [len(o.points) for o in objs] == [2, 1]
    assert segment_objects(ScenePointCloud("s", pts, [-1, -1, -1])) == []


def test_fixture_recovers_labels_and_ids():
    scene, gt = generate_fixture_scene(0, 8, 200)
    objs = segment_objects(scene)
    assert [o.object_id for o in objs] == list(range(8))
    assert len(set(scene.labels.tolist())) == 8
    for o, (name, box) in zip(objs, gt):
        assert o.class_name == name
        got = bbox_of(compute_attributes(o))
        np.testing.assert_allclose(got.center, box.center, atol=1e-9)
        np.testing.assert_allclose(got.extents, box.extents, atol=1e-9)


def test_seed7_boxes_iou():
    scene, gt = generate_fixture_scene(7, 8, 200)
    ious = [iou_3d(bbox_of(compute_attributes(o)), box) for o, (_, box) in zip(segment_objects(scene), gt)]
    assert len(ious) == 8 and min(ious) >= 0.9


def test_fixture_determinism_and_minimal():
    a, ga = generate_fixture_scene(0, 8, 200)
    b, gb = generate_fixture_scene(0, 8, 200)
    assert a.points.tobytes() == b.points.tobytes() and ga == gb
    tiny, _ = generate_fixture_scene(5, 1, 2)
    assert len(tiny) == 2
    with pytest.raises(ValueError):
        generate_fixture_scene(0, 0, 2)
    with pytest.raises(ValueError):
        generate_fixture_scene(0, 1, 1)


def test_compute_attributes_examples():
    pts = np.array([[0, 0, 0, 0.5, 0.5, 0.5], [2, 2, 2, 0.5, 0.5, 0.5]])
    a = compute_attributes(SegmentedObject(0, "x", pts))
    assert a == ObjectAttributes((1, 1, 1), (2, 2, 2), (0.5, 0.5, 0.5))
    assert bbox_of(a).volume == 8
    single = compute_attributes(SegmentedObject(0, "x", [[3, 4, 5, 0, 0, 0]]))
    assert single.center == (3, 4, 5) and single.size == (0, 0, 0)
    assert bbox_of(single).volume == 0


def test_unit_cube_samples_size():
    rng = np.random.default_rng(0)
    pts = np.hstack([rng.uniform(0, 1, (500, 3)), np.zeros((500, 3))])
    size = np.array(compute_attributes(SegmentedObject(0, "cube", pts)).size)
    # independent brute-force min/max
    expected = np.array([max(p[i] for p in pts) - min(p[i] for p in pts) for i in range(3)])
    np.testing.assert_allclose(size, expected, atol=1e-12)
    assert np.all(np.abs(size - 1) <= 0.05)


def test_negative_extent_rejected():
    with pytest.raises(ValueError):
        BBox3D((0, 0, 0), (1, -1, 1))


coords = st.floats(-50, 50, allow_nan=False)
cloud = st.lists(
    st.tuples(coords, coords, coords, st.integers(-1, 4)), min_size=1, max_size=40
)


def _scene(rows):
    arr = np.array([[x, y, z, 0.2, 0.4, 0.6] for x, y, z, _ in rows])
    return ScenePointCloud("p", arr, [lab for *_, lab in rows], {i: f"c{i}" for i in range(5)})


@settings(max_examples=80, deadline=None)
@given(cloud)
def test_partition_and_containment(rows):
    scene = _scene(rows)
    objs = segment_objects(scene)
    labeled = int(np.sum(scene.labels >= 0))
    assert sum(len(o.points) for o in objs) == labeled
    assert [o.object_id for o in objs] == sorted({int(l) for l in scene.labels if l >= 0})
    for o in objs:
        box = bbox_of(compute_attributes(o))
        xyz = o.points[:, :3]
        assert np.all(xyz >= box.lo - 1e-9) and np.all(xyz <= box.hi + 1e-9)


@settings(max_examples=60, deadline=None)
@given(cloud, st.sampled_from([0.5, 2.0, 4.0, 0.25]))
def test_scale_equivariance(rows, s):
    # powers of two keep the scaling exact in floating point
    scene = _scene(rows)
    scaled = ScenePointCloud("p", np.hstack([scene.xyz * s, scene.rgb]), scene.labels, scene.classes)
    for a, b in zip(segment_objects(scene), segment_objects(scaled)):
        aa, bb = compute_attributes(a), compute_attributes(b)
        assert tuple(c * s for c in aa.center) == bb.center
        assert tuple(c * s for c in aa.size) == bb.size
