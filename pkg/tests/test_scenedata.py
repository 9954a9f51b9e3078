import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.ndimage import maximum_filter

from rnnpose.scenedata import (
    Joint, ParseError, Person, Scene, SceneConfig, SceneError, _box, _boxes_intersect, format_scenes,
    generate_scenes, generate_synthetic_scene, joint_subset, object_scale, oks, parse_coco_keypoints,
    parse_scenes, read_scenes, render_aggregate_heatmaps, render_gt_heatmaps, scenes_to_coco, write_scenes,
)

FIXTURES = Path(__file__).parent / "fixtures"


def person(*xy, visible=None):
    vis = visible or [True] * len(xy)
    return Person(tuple(Joint(float(x), float(y), v) for (x, y), v in zip(xy, vis)))


def test_peak_value_and_sigma_distance():
    scene = Scene((person((5, 5), (10, 3)),), map_size=16, joint_count=2)
    maps = render_gt_heatmaps(scene, sigma=1.5)[0]
    assert maps[0, 5, 5] == 1.0
    # one grid step at sigma = 1 lies exactly one sigma away
    unit = render_gt_heatmaps(scene, sigma=1.0)[0]
    assert unit[0, 5, 6] == pytest.approx(math.exp(-0.5), abs=1e-15)
    assert unit[0, 5, 6] == pytest.approx(0.60653, abs=1e-5)


def test_invisible_joint_renders_zero_map():
    scene = Scene((person((5, 5), (0, 0), visible=[True, False]),), map_size=12, joint_count=2)
    maps = render_gt_heatmaps(scene)[0]
    assert np.all(maps[1] == 0.0)


def test_maps_are_disjoint_per_person():
    scene = Scene((person((3, 3)), person((9, 9))), map_size=12, joint_count=1)
    a, b = render_gt_heatmaps(scene)
    assert a[0, 3, 3] == 1.0 and b[0, 9, 9] == 1.0
    assert a[0, 9, 9] < 1e-6 and b[0, 3, 3] < 1e-6


def test_aggregate_single_person_identity():
    scene = Scene((person((4, 6), (7, 2)),), map_size=10, joint_count=2)
    np.testing.assert_array_equal(render_aggregate_heatmaps(scene), render_gt_heatmaps(scene)[0])


def test_aggregate_same_location_single_peak():
    scene = Scene((person((5, 5)), person((5, 5))), map_size=12, joint_count=1)
    agg = render_aggregate_heatmaps(scene)[0]
    assert agg.max() == 1.0
    assert np.count_nonzero(agg == maximum_filter(agg, size=3)) == 1


def test_aggregate_far_apart_two_peaks():
    scene = Scene((person((2, 2)), person((12, 12))), map_size=16, joint_count=1)
    agg = render_aggregate_heatmaps(scene)[0]
    peaks = np.argwhere((agg == maximum_filter(agg, size=3)) & (agg > 0.5))
    assert sorted(map(tuple, peaks)) == [(2, 2), (12, 12)]
    assert agg[2, 2] == 1.0 and agg[12, 12] == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_aggregate_equals_pixelwise_max(seed):
    scene = generate_synthetic_scene(seed, SceneConfig(map_size=16, n_range=(1, 2), height_range=(0.3, 0.4), min_separation=1.0))
    per = render_gt_heatmaps(scene)
    np.testing.assert_array_equal(render_aggregate_heatmaps(scene), np.max(np.stack(per), axis=0))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_gt_peak_at_rounded_location(seed):
    scene = generate_synthetic_scene(seed)
    for p, maps in zip(scene.persons, render_gt_heatmaps(scene)):
        for j, joint in enumerate(p.joints):
            y, x = np.unravel_index(np.argmax(maps[j]), maps[j].shape)
            assert (x, y) == (round(joint.x), round(joint.y))
            assert maps[j].max() == 1.0


def test_joint_subset_default():
    assert joint_subset(5) == (0, 5, 6, 11, 12)
    assert len(set(joint_subset(17))) == 17
    with pytest.raises(SceneError):
        joint_subset(18)


def test_scene_bounds_invariant():
    with pytest.raises(SceneError):
        Scene((person((32, 0)),), map_size=32, joint_count=1)
    with pytest.raises(SceneError):
        Scene((Person((Joint(0, 0, False),)),), map_size=8, joint_count=1)
    Scene((), map_size=8, joint_count=1)


# ---------------------------------------------------------------- COCO


def test_coco_empty_annotations():
    assert parse_coco_keypoints(json.dumps({"images": [], "annotations": []})).scenes == []


def test_coco_all_invisible_gives_no_scene():
    doc = {"images": [{"id": 1, "width": 10, "height": 10}],
           "annotations": [{"image_id": 1, "keypoints": [0] * 51}]}
    res = parse_coco_keypoints(json.dumps(doc))
    assert res.scenes == [] and res.dropped_persons == 1


def test_coco_two_person_fixture_rescale():
    res = parse_coco_keypoints((FIXTURES / "coco_two_person.json").read_bytes(), map_size=32, joint_count=5)
    assert len(res.scenes) == 1 and res.image_ids == [7]
    scene = res.scenes[0]
    assert scene.n == 2
    s = 32 / 640  # map_size / max(width, height)
    a, b = scene.persons
    assert [(j.x, j.y, j.visible) for j in a.joints] == [
        (320 * s, 100 * s, True), (300 * s, 140 * s, True), (340 * s, 140 * s, True), (305 * s, 240 * s, True),
        (0.0, 0.0, False)]
    assert (a.joints[0].x, a.joints[0].y, a.joints[3].x) == (16.0, 5.0, 15.25)
    assert [(j.x, j.y) for j in b.joints] == [(5.0, 10.0), (4.0, 12.0), (6.0, 12.0), (4.25, 17.0), (5.75, 17.0)]
    assert res.dropped_persons == 1 and res.clamped == 0


def test_coco_clamps_and_counts():
    doc = {"images": [{"id": 1, "width": 32, "height": 32}],
           "annotations": [{"image_id": 1, "keypoints": [40, -2, 2] + [0] * 48}]}
    res = parse_coco_keypoints(json.dumps(doc), map_size=32, joint_count=1, keypoints=[0])
    j = res.scenes[0].persons[0].joints[0]
    assert res.clamped == 1 and 0 <= j.x < 32 and j.y == 0.0


@pytest.mark.parametrize("doc, path", [
    ({"images": []}, "$"),
    ({"annotations": {}}, "$.annotations"),
    ({"images": [{"id": 1, "width": 5, "height": 5}], "annotations": [{"keypoints": [0] * 51}]}, "$.annotations[0]"),
    ({"images": [{"id": 1, "width": 5, "height": 5}], "annotations": [{"image_id": 1, "keypoints": [1, 2]}]},
     "$.annotations[0].keypoints"),
    ({"images": [{"id": 1}], "annotations": []}, "$.images[0]"),
    ({"images": [], "annotations": [{"image_id": 3, "keypoints": [0] * 51}]}, "$.images"),
])
def test_coco_parse_errors_name_path(doc, path):
    with pytest.raises(ParseError) as err:
        parse_coco_keypoints(json.dumps(doc))
    assert str(err.value).startswith(path)


def test_coco_invalid_json():
    with pytest.raises(ParseError):
        parse_coco_keypoints(b"{not json")


def test_coco_round_trip():
    scenes = generate_scenes(3, 20)
    back = parse_coco_keypoints(json.dumps(scenes_to_coco(scenes)), map_size=32, joint_count=5).scenes
    assert back == scenes


# ---------------------------------------------------------------- fixture format


def test_fixture_round_trip(tmp_path):
    scenes = generate_scenes(4, 15, SceneConfig(snap_to_grid=False))
    path = tmp_path / "s.txt"
    write_scenes(path, scenes)
    assert read_scenes(path) == scenes
    assert format_scenes(parse_scenes(format_scenes(scenes))) == format_scenes(scenes)


def test_fixture_parse_errors():
    with pytest.raises(ParseError):
        parse_scenes("")
    with pytest.raises(ParseError):
        parse_scenes("bogus 1 32 5\n")
    with pytest.raises(ParseError):
        parse_scenes("rnnpose-scenes 1 32 1\nscene 2\n1 1 1\n")
    with pytest.raises(ParseError):
        parse_scenes("rnnpose-scenes 1 32 2\nscene 1\n1 1 1\n")


# ---------------------------------------------------------------- synthesis


def test_generation_deterministic():
    assert generate_synthetic_scene(11) == generate_synthetic_scene(11)
    assert generate_synthetic_scene(11) != generate_synthetic_scene(12)


def test_generation_n_range_fixed():
    cfg = SceneConfig(n_range=(1, 1))
    assert all(s.n == 1 for s in generate_scenes(0, 50, cfg))


def test_generation_covers_n_range():
    assert {s.n for s in generate_scenes(0, 200)} == {1, 2, 3, 4}


def test_overlap_one_always_intersects():
    cfg = SceneConfig(n_range=(2, 2), overlap_fraction=1.0)
    hits = 0
    for s in generate_scenes(5, 100, cfg):
        a, b = (_box(p.as_array()[:, :2]) for p in s.persons)
        hits += _boxes_intersect(a, b)
    assert hits == 100


def test_overlap_zero_never_intersects_and_separation():
    cfg = SceneConfig(overlap_fraction=0.0)
    for s in generate_scenes(6, 60, cfg):
        boxes = [_box(p.as_array()[:, :2]) for p in s.persons]
        pts = [p.as_array()[:, :2] for p in s.persons]
        for i in range(s.n):
            for k in range(i + 1, s.n):
                assert not _boxes_intersect(boxes[i], boxes[k])
                assert np.min(np.linalg.norm(pts[i][:, None] - pts[k][None], axis=2)) >= cfg.min_separation


def test_generation_infeasible_raises():
    with pytest.raises(SceneError):
        generate_synthetic_scene(0, SceneConfig(n_range=(12, 12), map_size=12, retries=5))
    with pytest.raises(SceneError):
        generate_synthetic_scene(0, SceneConfig(n_range=(0, 2)))


# ---------------------------------------------------------------- OKS


def test_oks_identity_and_absent():
    gt = person((3, 4), (10, 12), (6, 8))
    assert oks(gt, gt, object_scale(gt)) == 1.0
    absent = person((3, 4), (10, 12), (6, 8), visible=[False] * 3)
    assert oks(absent, gt, object_scale(gt)) == 0.0


def test_oks_half_at_analytic_offset():
    gt = person((3, 4), (10, 12))
    scale, kappa = object_scale(gt), 0.1
    d = scale * kappa * math.sqrt(2 * math.log(2))
    pred = person((3 + d, 4), (10, 12))
    # one of two joints at similarity 0.5, the other exact
    assert oks(pred, gt, scale, kappa) == pytest.approx(0.75, abs=1e-12)
    single = person((3, 4))
    assert oks(person((3 + 0.5 * 0.1 * math.sqrt(2 * math.log(2)), 4)), single, 0.5, 0.1) == pytest.approx(0.5, abs=1e-12)


def test_oks_errors():
    gt = person((1, 1))
    with pytest.raises(SceneError):
        oks(gt, gt, 0.0)
    with pytest.raises(SceneError):
        oks(person((1, 1), (2, 2)), gt, 1.0)


def test_object_scale():
    assert object_scale(person((0, 0), (4, 9))) == 6.0
    assert object_scale(person((2, 2))) == 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_oks_symmetric_under_joint_relabeling(seed):
    rng = np.random.default_rng(seed)
    gt_xy = rng.uniform(0, 31, size=(5, 2))
    pr_xy = gt_xy + rng.normal(scale=2.0, size=(5, 2))
    vis = rng.random(5) < 0.8
    vis[0] = True
    kappa = rng.uniform(0.05, 0.2, size=5)
    gt = person(*gt_xy, visible=list(vis))
    pred = person(*np.clip(pr_xy, 0, 31))
    perm = rng.permutation(5)
    gt_p = Person(tuple(gt.joints[i] for i in perm))
    pred_p = Person(tuple(pred.joints[i] for i in perm))
    assert oks(pred_p, gt_p, 3.0, kappa[perm]) == pytest.approx(oks(pred, gt, 3.0, kappa), abs=1e-12)
