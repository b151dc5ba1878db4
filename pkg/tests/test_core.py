import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from keydyn.config import fingerprint, load_config
from keydyn.core import (BehindCamera, CameraModel, Pose2, Se2Transform, clip_speed, pose_error,
                         sample_augmentation, se2_apply, se2_rotate_vector, wrap_angle)

coord = st.floats(-5, 5, allow_nan=False)
angle = st.floats(-10, 10, allow_nan=False)
transforms = st.builds(Se2Transform, coord, coord, angle)


def test_se2_apply_examples():
    assert np.allclose(se2_apply(Se2Transform.identity(), [1.0, 2.0]), [1.0, 2.0])
    assert np.allclose(se2_apply(Se2Transform(1.0, 0.0, math.pi / 2), [1.0, 0.0]), [1.0, 1.0], atol=1e-15)


def test_se2_apply_passes_height_through():
    out = se2_apply(Se2Transform(0.1, 0.2, 0.3), np.array([[1.0, 0.0, 0.7]]))
    assert out[0, 2] == 0.7


@given(transforms, coord, coord)
def test_se2_round_trip(t, x, y):
    p = np.array([x, y])
    assert np.allclose(se2_apply(t.inverse(), se2_apply(t, p)), p, atol=1e-12)


def test_rotate_vector_examples():
    assert np.allclose(se2_rotate_vector(Se2Transform(5, 5, 0.0), [3.0, 4.0]), [3.0, 4.0])
    assert np.allclose(se2_rotate_vector(Se2Transform(0, 0, math.pi), [1.0, 0.0]), [-1.0, 0.0], atol=1e-15)


@given(transforms, coord, coord)
def test_rotate_vector_preserves_norm(t, x, y):
    v = np.array([x, y])
    assert abs(np.linalg.norm(se2_rotate_vector(t, v)) - np.linalg.norm(v)) <= 1e-12 * max(1.0, np.linalg.norm(v))


@given(transforms)
def test_group_laws(t):
    e = Se2Transform.identity()
    assert np.allclose(t.compose(e).as_array(), Se2Transform(t.dx, t.dy, wrap_angle(t.dtheta)).as_array(),
                       atol=1e-12)
    ident = t.compose(t.inverse())
    assert np.allclose([ident.dx, ident.dy], 0.0, atol=1e-12)
    assert abs(wrap_angle(ident.dtheta)) < 1e-12


@given(transforms, transforms, coord, coord)
def test_compose_matches_sequential_application(a, b, x, y):
    p = np.array([x, y])
    assert np.allclose(se2_apply(a.compose(b), p), se2_apply(a, se2_apply(b, p)), atol=1e-11)


def test_wrap_angle_range():
    th = np.linspace(-20, 20, 1001)
    w = wrap_angle(th)
    assert np.all(w > -np.pi) and np.all(w <= np.pi)
    assert np.allclose(np.sin(w), np.sin(th)) and np.allclose(np.cos(w), np.cos(th))
    assert wrap_angle(-np.pi) == np.pi


def test_pose_error_examples():
    e = pose_error(Pose2(0.1, 0.2, 0.3), Pose2(0.1, 0.2, 0.3))
    assert e.pos_err == 0.0 and e.angle_err == 0.0
    e = pose_error(Pose2(0, 0, 0), Pose2(0.03, 0, math.pi / 6))
    assert e.pos_err == pytest.approx(3.0) and e.angle_err == pytest.approx(30.0)
    e = pose_error(Pose2(0, 0, 3.1), Pose2(0, 0, -3.1))
    assert e.angle_err == pytest.approx(math.degrees(2 * math.pi - 6.2))
    assert e.angle_err == pytest.approx(4.78, abs=0.02)  # 4.766, not 355


poses = st.builds(Pose2, coord, coord, angle)


@given(poses, poses, poses)
def test_pose_error_symmetric_and_triangle(a, b, c):
    assert pose_error(a, b) == pose_error(b, a)
    assert pose_error(a, c).pos_err <= pose_error(a, b).pos_err + pose_error(b, c).pos_err + 1e-9


def _cam():
    return CameraModel(100.0, 120.0, 80.0, 60.0, np.eye(3), np.zeros(3), 160, 120)


def test_project_on_axis():
    uv, z = _cam().project(np.array([0.0, 0.0, 1.0]))
    assert np.allclose(uv, [80.0, 60.0]) and z == 1.0


def test_project_doubling_depth_halves_offset():
    cam = _cam()
    uv1, _ = cam.project(np.array([0.1, -0.05, 1.0]))
    uv2, _ = cam.project(np.array([0.1, -0.05, 2.0]))
    c = np.array([cam.cx, cam.cy])
    assert np.allclose(uv2 - c, (uv1 - c) / 2)


def test_project_behind_camera():
    with pytest.raises(BehindCamera):
        _cam().project(np.array([0.0, 0.0, -1.0]))
    with pytest.raises(BehindCamera):
        _cam().project(np.array([0.0, 0.0, 0.0]))


@settings(max_examples=50)
@given(st.floats(-0.3, 0.3), st.floats(-0.3, 0.3), st.floats(0.0, 0.2))
def test_unproject_round_trip(x, y, z):
    cam = CameraModel.look_at((0.3, -0.4, 0.5), (0, 0, 0), 160, 120, fx=200.0)
    p = np.array([x, y, z])
    uv, d = cam.project(p)
    assert np.allclose(cam.unproject(uv, d), p, atol=1e-9)


def test_camera_rejects_bad_rotation():
    with pytest.raises(ValueError):
        CameraModel(1, 1, 0, 0, np.diag([1.0, 1.0, -1.0]), np.zeros(3), 4, 4)


def test_camera_dict_round_trip():
    cam = CameraModel.look_at((0.3, -0.4, 0.5), (0, 0, 0), 160, 120, fx=200.0)
    back = CameraModel.from_dict(cam.to_dict())
    assert np.array_equal(back.R, cam.R) and np.array_equal(back.t, cam.t) and back.fx == cam.fx


def test_augmentation_zero_width_is_identity():
    t = sample_augmentation(np.random.default_rng(3), 0.0, 0.0)
    assert t.as_array().tolist() == [0.0, 0.0, 0.0]


def test_augmentation_reproducible_and_centered():
    a = sample_augmentation(np.random.default_rng(11))
    b = sample_augmentation(np.random.default_rng(11))
    assert a == b
    rng = np.random.default_rng(0)
    th = np.array([sample_augmentation(rng).dtheta for _ in range(10_000)])
    assert abs(th.mean()) < 0.05
    assert th.min() > -math.pi and th.max() <= math.pi


def test_clip_speed():
    a = clip_speed(np.array([[0.3, 0.4], [0.01, 0.0], [0.0, 0.0]]), 0.2)
    assert np.allclose(np.linalg.norm(a, axis=1), [0.2, 0.01, 0.0])
    assert np.allclose(a[0], [0.12, 0.16])


def test_config_overrides_and_fingerprint(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"planner": {"N": 10}, "task": "angled"}')
    cfg = load_config(p, ["planner.gamma=3.5", "eval.methods=[\"SDS\"]", "task=occlusions"])
    assert cfg["planner"]["N"] == 10 and cfg["planner"]["gamma"] == 3.5
    assert cfg["planner"]["H"] == 10
    assert cfg["eval"]["methods"] == ["SDS"] and cfg["task"] == "occlusions"
    assert fingerprint(cfg) == fingerprint(load_config(p, ["planner.gamma=3.5", "eval.methods=[\"SDS\"]",
                                                           "task=occlusions"]))
    assert fingerprint(cfg) != fingerprint(load_config(p))
    with pytest.raises(ValueError):
        load_config(None, ["nonsense"])
