import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import points_in_convex
from crtbev.geometry import CameraModel, GridSpec, GtObject, bev_footprint
from crtbev.rng import substream
from crtbev.synth import (BACKGROUND_DEPTH, CameraRigConfig, SceneConfig, SceneOverconstrained,
                          class_signatures, generate_sequence, load_sequence, propagate,
                          render_camera, sample_radar, save_sequence)

SMALL_RIG = CameraRigConfig(n_cameras=2, image_w=16, image_h=6, channels=4)


def small_cfg(**kw) -> SceneConfig:
    base = dict(n_objects=3, seed=3, cameras=SMALL_RIG, grid=GridSpec(32, 32, 1.0, (-16.0, -16.0)),
                min_range=3.0, min_gap=1.0)
    base.update(kw)
    return SceneConfig(**base)


def seq_arrays(seq):
    out = []
    for f in seq.frames:
        out += [f.radar.xyz, f.radar.features, f.radar.sweep, f.ego_pose]
        out += [v.features for v in f.cameras] + [v.depth for v in f.cameras]
    return out


# ---------------------------------------------------------------- generate_sequence

def test_empty_scene_only_clutter():
    seq = generate_sequence(small_cfg(n_objects=0), 3)
    for f in seq.frames:
        assert f.objects == []
        assert len(f.radar) == small_cfg().clutter_points
        assert np.all(f.radar.source == -1)
        for v in f.cameras:
            assert np.all(v.depth == BACKGROUND_DEPTH)


def test_constant_velocity_step():
    obj = GtObject((10.0, 0.0, 0.8), (4.0, 2.0, 1.6), 0.0, (2.0, 0.0))
    seq = generate_sequence(small_cfg(objects=[obj], t_s=0.5), 2)
    assert seq.frames[1].objects[0].center[:2] == (11.0, 0.0)
    assert propagate(obj, 0.5).center == (11.0, 0.0, 0.8)


def test_seeded_generation_is_bit_identical():
    a = generate_sequence(small_cfg(seed=42), 3)
    b = generate_sequence(small_cfg(seed=42), 3)
    for x, y in zip(seq_arrays(a), seq_arrays(b)):
        assert x.tobytes() == y.tobytes()
    assert [o.to_dict() for f in a.frames for o in f.objects] == [o.to_dict() for f in b.frames for o in f.objects]


def test_different_seeds_differ():
    a = generate_sequence(small_cfg(seed=1), 1)
    b = generate_sequence(small_cfg(seed=2), 1)
    assert a.frames[0].radar.xyz.tobytes() != b.frames[0].radar.xyz.tobytes()


def test_overconstrained_scene():
    with pytest.raises(SceneOverconstrained, match="scene overconstrained"):
        generate_sequence(small_cfg(n_objects=200, max_tries=20), 2)


@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_kinematics_and_disjoint_footprints(seed, n_frames):
    seq = generate_sequence(small_cfg(seed=seed, n_objects=4), n_frames)
    ts = [f.timestamp for f in seq.frames]
    assert all(b > a for a, b in zip(ts, ts[1:]))
    for f0, f1 in zip(seq.frames, seq.frames[1:]):
        for a, b in zip(f0.objects, f1.objects):
            expected = np.array(a.center[:2]) + np.array(a.velocity) * seq.t_s
            assert np.array_equal(np.array(b.center[:2]), expected)
    for f in seq.frames:
        polys = [bev_footprint(o) for o in f.objects]
        for i in range(len(polys)):
            for j in range(i + 1, len(polys)):
                d = np.hypot(*(np.array(f.objects[i].center[:2]) - f.objects[j].center[:2]))
                ri = 0.5 * math.hypot(*f.objects[i].dims[:2])
                rj = 0.5 * math.hypot(*f.objects[j].dims[:2])
                assert d >= ri + rj


# ---------------------------------------------------------------- radar

def test_full_dropout_leaves_clutter():
    obj = GtObject((10.0, 0.0, 0.8), (4.0, 2.0, 1.6), 0.0, (2.0, 0.0))
    cloud = sample_radar([obj], small_cfg(radar_dropout=1.0), substream(0, "t"))
    assert np.all(cloud.source == -1)
    assert len(cloud) == small_cfg().clutter_points


@given(st.integers(0, 2**31 - 1), st.floats(-math.pi, math.pi))
def test_noiseless_sweep0_points_inside_footprint(seed, yaw):
    obj = GtObject((8.0, -3.0, 0.8), (4.0, 2.0, 1.6), yaw, (3.0, 1.0))
    cfg = small_cfg(radar_noise=0.0, radar_dropout=0.0, sweeps=3)
    cloud = sample_radar([obj], cfg, substream(seed, "t"))
    pts = cloud.xyz[(cloud.source == 0) & (cloud.sweep == 0), :2]
    assert len(pts) == cfg.radar_points_per_object
    assert points_in_convex(pts, bev_footprint(obj).vertices).all()


def test_sweep_accumulation_spread():
    # a near-point object isolates the back-propagation spread: 4 m/s * 5/12 s
    obj = GtObject((10.0, 0.0, 0.8), (0.01, 0.01, 1.6), 0.0, (4.0, 0.0))
    cfg = small_cfg(radar_noise=0.0, radar_dropout=0.0, sweeps=6, sweep_period=1 / 12,
                    radar_points_per_object=20)
    cloud = sample_radar([obj], cfg, substream(0, "t"))
    x = cloud.xyz[cloud.source == 0, 0]
    assert x.max() - x.min() == pytest.approx(4.0 * 5 / 12, abs=0.02)


# ---------------------------------------------------------------- camera

def test_empty_render_background():
    cam = CameraModel.from_yaw(0.0, 16, 6, math.radians(90))
    _, depth = render_camera([], cam, 4, class_signatures(0, 4), substream(0, "c"))
    assert np.all(depth == BACKGROUND_DEPTH)


def test_principal_ray_depth():
    cam = CameraModel(8.0, 8.0, 8.0, 3.0, 16, 6, translation=np.array([0.0, 0.0, 1.0]))
    obj = GtObject((10.0, 0.0, 0.8), (4.0, 2.0, 1.6), 0.0, (0, 0))
    _, depth = render_camera([obj], cam, 4, class_signatures(0, 4), substream(0, "c"))
    # pixel (2, 7) sits half a pixel off the principal point; the front face is flat
    assert depth[2, 7] == pytest.approx(10.0 - 2.0, abs=1e-12)


def test_nearer_object_wins():
    cam = CameraModel.from_yaw(0.0, 16, 6, math.radians(60), height=1.0)
    near = GtObject((8.0, 0.0, 1.0), (2.0, 2.0, 2.0), 0.0, (0, 0))
    far = GtObject((20.0, 0.0, 1.0), (2.0, 6.0, 2.0), 0.0, (0, 0))
    sig = class_signatures(0, 4)
    _, d_both = render_camera([far, near], cam, 4, sig, substream(0, "c"), noise=0.0)
    _, d_near = render_camera([near], cam, 4, sig, substream(0, "c"), noise=0.0)
    _, d_far = render_camera([far], cam, 4, sig, substream(0, "c"), noise=0.0)
    assert np.array_equal(d_both, np.minimum(d_near, d_far))
    assert np.any(d_near < d_far)


def _march_depth(origin, ray, objects, t_max=40.0, step=1e-3):
    """First optical depth at which the ray enters any box, by dense marching."""
    t = np.arange(step, t_max, step)
    pts = origin + t[:, None] * ray
    hit = np.zeros(len(t), dtype=bool)
    for o in objects:
        c, s = math.cos(-o.yaw), math.sin(-o.yaw)
        local = pts - np.array(o.center)
        lx = c * local[:, 0] - s * local[:, 1]
        ly = s * local[:, 0] + c * local[:, 1]
        half = np.array(o.dims) / 2
        hit |= (np.abs(lx) <= half[0]) & (np.abs(ly) <= half[1]) & (np.abs(local[:, 2]) <= half[2])
    return t[np.argmax(hit)] if hit.any() else math.inf


def test_zbuffer_on_random_occlusion_scenes():
    cam = CameraModel.from_yaw(0.0, 12, 4, math.radians(60), height=1.0)
    rays = cam.pixel_rays()
    sig = class_signatures(0, 2)
    for seed in range(100):
        rng = np.random.default_rng(seed)
        objs = [GtObject((rng.uniform(4, 30), rng.uniform(-6, 6), 1.0), (rng.uniform(1, 4), rng.uniform(1, 4), 2.0),
                         rng.uniform(-math.pi, math.pi), (0, 0)) for _ in range(3)]
        _, depth = render_camera(objs, cam, 2, sig, substream(seed, "c"), noise=0.0)
        for h, w in zip(rng.integers(0, 4, 4), rng.integers(0, 12, 4)):
            ref = _march_depth(cam.translation, rays[h, w], objs)
            if math.isinf(ref):
                assert math.isinf(depth[h, w])
            else:
                assert abs(depth[h, w] - ref) <= 1.5e-3 * np.linalg.norm(rays[h, w]) + 1e-9


# ---------------------------------------------------------------- serialization

def test_save_load_round_trip(tmp_path):
    seq = generate_sequence(small_cfg(seed=9), 2)
    save_sequence(seq, tmp_path / "s")
    back = load_sequence(tmp_path / "s")
    for x, y in zip(seq_arrays(seq), seq_arrays(back)):
        assert x.tobytes() == y.tobytes()
    assert back.config == seq.config
    assert [o.to_dict() for o in back.frames[1].objects] == [o.to_dict() for o in seq.frames[1].objects]


def test_ego_motion_moves_objects_in_ego_frame():
    obj = GtObject((10.0, 5.0, 0.8), (4.0, 2.0, 1.6), 0.0, (0.0, 0.0))
    seq = generate_sequence(small_cfg(objects=[obj], ego_velocity=(2.0, 0.0)), 2)
    assert seq.frames[1].objects_in_ego()[0].center[:2] == pytest.approx((9.0, 5.0))
