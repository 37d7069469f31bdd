import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtlvad.core import DatasetRoot, RunConfig, seeded_rng, tree_hash
from mtlvad.synthdata import (
    ANOMALY_KINDS,
    AnomalyEvent,
    SceneScript,
    SpriteSpec,
    anomaly_script,
    contrast_script,
    make_benchmark,
    normal_script,
    perspective_scale,
    render_scene,
)
from mtlvad.teachers import direction_features, flow_to_mag_ang

CFG = RunConfig(input_size=64)


def _single(velocity=(2.0, 0.0), depth=1.0, shape="distractor", duration=5, events=(), is_test=False):
    sp = SpriteSpec(shape, 16.0, velocity, depth, (20.0, 32.0), 1, duration)
    return SceneScript("s", duration, [sp], list(events), is_test=is_test)


def test_single_sprite_analytic_flow():
    frames = list(render_scene(_single(), CFG))
    f = frames[2]
    on = f.instances >= 0
    assert on.any()
    assert np.all(f.flow.values[on] == np.array([2.0, 0.0], dtype=np.float32))
    assert not f.flow.values[~on].any()
    assert not f.depth.values[~on].any()
    assert np.all(f.depth.values[on] == 1.0)


def test_perspective_slows_far_sprites():
    near = list(render_scene(_single(depth=1.0), CFG))[2]
    far = list(render_scene(_single(depth=0.35), CFG))[2]
    v_far = far.flow.values[far.instances >= 0][0, 0]
    v_near = near.flow.values[near.instances >= 0][0, 0]
    assert v_far == pytest.approx(2.0 * perspective_scale(0.35))
    assert v_far < v_near
    assert (far.instances >= 0).sum() < (near.instances >= 0).sum()


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 0.98), st.floats(0.01, 0.2), st.floats(0.2, 3.0))
def test_pixel_speed_strictly_increasing_in_depth(d, dd, speed):
    sp = SpriteSpec("distractor", 10.0, (speed, 0.0), d, (30.0, 30.0), 1, 3)
    sp2 = SpriteSpec("distractor", 10.0, (speed, 0.0), min(d + dd, 1.0), (30.0, 30.0), 1, 3)
    r1 = list(render_scene(SceneScript("a", 3, [sp]), CFG))[1]
    r2 = list(render_scene(SceneScript("b", 3, [sp2]), CFG))[1]
    m1 = np.abs(r1.flow.values[r1.instances >= 0][:, 0]).max()
    m2 = np.abs(r2.flow.values[r2.instances >= 0][:, 0]).max()
    assert m2 > m1


def test_label_construction_fast_motion_window():
    ev = AnomalyEvent((40, 60), 0, "fast_motion")
    sc = _single(velocity=(0.5, 0.0), duration=70, events=[ev], is_test=True)
    labels = [r.label for r in render_scene(sc, CFG)]
    assert [i + 1 for i, v in enumerate(labels) if v] == list(range(40, 61))
    frames = list(render_scene(sc, CFG))
    assert frames[49].flow.values[frames[49].instances >= 0][0, 0] == pytest.approx(1.0)
    assert frames[20].flow.values[frames[20].instances >= 0][0, 0] == pytest.approx(0.5)


def test_direction_change_reverses_velocity():
    ev = AnomalyEvent((10, 17), 0, "sudden_direction_change", period=2)
    sc = _single(velocity=(1.0, 0.0), duration=20, events=[ev], is_test=True)
    fr = list(render_scene(sc, CFG))
    vx = [fr[t - 1].flow.values[fr[t - 1].instances >= 0][0, 0] for t in range(8, 20)]
    assert vx == [1, 1, -1, -1, 1, 1, -1, -1, 1, 1, 1, 1]


def test_script_validation():
    with pytest.raises(ValueError):
        _single(events=[AnomalyEvent((1, 2), 0, "fast_motion")]).validate()  # events in a train script
    with pytest.raises(ValueError):
        _single(events=[AnomalyEvent((1, 2), 0, "unseen_class")], is_test=True).validate()
    with pytest.raises(ValueError):
        _single(events=[AnomalyEvent((3, 9), 0, "fast_motion")], is_test=True).validate()
    with pytest.raises(ValueError):
        SpriteSpec("pedestrian_blob", 5.0, (9.0, 0.0), 0.5, (0, 0), 1, 2).validate()
    with pytest.raises(ValueError):
        SpriteSpec("pedestrian_blob", 5.0, (1.0, 0.0), 1.5, (0, 0), 1, 2).validate()


def test_script_json_round_trip(tmp_path):
    sc = anomaly_script(seeded_rng(0), CFG, "v", 60)
    sc.save(tmp_path / "s.json")
    back = SceneScript.load(tmp_path / "s.json")
    assert back == sc


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_oracle_flow_warp_consistency(seed):
    """Pulling each sprite pixel back along the flow lands on the same part in frame t-1 with the same intensity."""
    sc = anomaly_script(seeded_rng(seed), CFG, "v", 40)
    frames = list(render_scene(sc, CFG))
    total = bad = 0
    for a, b in zip(frames[:-1], frames[1:]):
        on = b.instances >= 0
        ys, xs = np.nonzero(on)
        fx, fy = b.flow.values[ys, xs, 0], b.flow.values[ys, xs, 1]
        sx, sy = np.rint(xs - fx).astype(int), np.rint(ys - fy).astype(int)
        inside = (sx >= 0) & (sx < 64) & (sy >= 0) & (sy < 64)
        ys, xs, sx, sy = ys[inside], xs[inside], sx[inside], sy[inside]
        visible = a.instances[sy, sx] == b.instances[ys, xs]  # not occluded in t-1
        integral = np.isclose(fx[inside], np.rint(fx[inside])) & np.isclose(fy[inside], np.rint(fy[inside]))
        keep = visible & integral
        total += keep.sum()
        bad += (np.abs(a.frame.pixels[sy, sx, 0] - b.frame.pixels[ys, xs, 0]) > 0.08)[keep].sum()
    assert total > 100
    assert bad / total <= 0.02


def test_direction_features_unit_norm_on_oracle_flow():
    sc = anomaly_script(seeded_rng(4), CFG, "v", 30)
    for r in render_scene(sc, CFG):
        mag, ang = flow_to_mag_ang(r.flow)
        x, y = direction_features(ang, mag)
        moving = mag.values[..., 0] > 0
        assert np.all(np.abs(x[moving] ** 2 + y[moving] ** 2 - 1) <= 1e-6)


def test_normal_scripts_have_no_events():
    for tag in ("mixed", "depth_diverse", "direction_diverse"):
        sc = normal_script(seeded_rng(1), CFG, "n", 60, tag=tag)
        assert not sc.anomaly_events and not sc.labels().any()


def test_anomaly_script_contains_each_kind_once():
    sc = anomaly_script(seeded_rng(7), CFG, "t", 100)
    assert sorted(e.kind for e in sc.anomaly_events) == sorted(ANOMALY_KINDS)
    ranges = sorted(e.frame_range for e in sc.anomaly_events)
    assert all(a[1] < b[0] for a, b in zip(ranges, ranges[1:]))


def test_contrast_script_layout():
    sc = contrast_script(CFG)
    kinds = {e.sprite_index: e.kind for e in sc.anomaly_events}
    assert kinds == {0: "sudden_direction_change", 1: "fast_motion"}
    assert sc.sprites[0].depth_lane == sc.sprites[1].depth_lane


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    cfg = RunConfig(input_size=32)
    kw = dict(n_train=2, n_test=6, train_duration=20, test_duration=40)
    a = tmp_path_factory.mktemp("a")
    b = tmp_path_factory.mktemp("b")
    inv = make_benchmark(7, cfg, a, **kw)
    make_benchmark(7, cfg, b, **kw)
    return a, b, inv


def test_benchmark_is_byte_identical(bench):
    a, b, _ = bench
    assert tree_hash(a) == tree_hash(b)


def test_benchmark_train_labels_zero_and_test_has_all_kinds(bench):
    a, _, inv = bench
    ds = DatasetRoot(a)
    for v in ds.train().videos():
        assert not v.labels().any()
    assert all(inv["anomaly_counts"][k] >= 1 for k in ANOMALY_KINDS)
    kinds = {e["kind"] for v in ds.test().videos() for e in json.loads(v.scene_script_path().read_text())["anomaly_events"]}
    assert kinds == set(ANOMALY_KINDS)
    tags = {json.loads(v.scene_script_path().read_text())["split_tag"] for v in ds.test().videos()}
    assert {"depth_diverse", "direction_diverse"} <= tags


def test_full_benchmark_has_required_size():
    from mtlvad.synthdata import benchmark_scripts

    train, test = benchmark_scripts(0, CFG)
    assert len(train) >= 8 and len(test) >= 6
    assert {s.split_tag for s in train} == {"mixed", "depth_diverse", "direction_diverse"}
