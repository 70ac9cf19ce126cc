"""
鱼眼相机模型测试

覆盖等距畸变投影、牛顿反投影、解析雅可比、位姿代数与标定文件读写。
"""

import numpy as np
import pytest
from hypothesis import given, settings as hsettings, strategies as st

from common.exceptions import CameraModelError, DataFormatError, UnprojectionError
from core.camera import (FisheyeCamera, FisheyeIntrinsics, Pose, default_rig, load_calibration, look_at_pose,
                         quat_multiply, quat_to_rotmat, quat_to_rotmat_backward, rotmat_to_quat, save_calibration)

unit = st.floats(min_value=-1.0, max_value=1.0, allow_nan=False)
quaternions = st.tuples(unit, unit, unit, unit).filter(lambda q: np.linalg.norm(q) > 0.1)
translations = st.tuples(*[st.floats(min_value=-10.0, max_value=10.0, allow_nan=False)] * 3)


def _rig_camera() -> FisheyeCamera:
    return default_rig()[0]


def test_project_known_value(pinhole_like_camera):
    """零畸变时 u = fx·θ + cx"""
    pixels, in_fov = pinhole_like_camera.project(np.array([1.0, 0.0, 1.0]))
    assert pixels[0] == pytest.approx(100.0 * np.pi / 4 + 320.0, abs=1e-9)
    assert pixels[0] == pytest.approx(398.540, abs=1e-3)
    assert pixels[1] == pytest.approx(240.0)
    assert bool(in_fov)


def test_optical_axis_maps_to_principal_point(pinhole_like_camera):
    pixels, in_fov = pinhole_like_camera.project(np.array([0.0, 0.0, 5.0]))
    np.testing.assert_allclose(pixels, [320.0, 240.0])
    assert bool(in_fov)


def test_point_behind_wide_fov_is_outside():
    """θ 超过 100° 半视场的点被标记为视场外"""
    cam = _rig_camera()
    _, in_fov = cam.project(np.array([[0.0, 0.0, -1.0], [1.0, 0.0, -0.5], [1.0, 0.0, -0.1]]))
    assert in_fov.tolist() == [False, False, True]


@given(theta=st.floats(min_value=0.0, max_value=1.5), phi=st.floats(min_value=0.0, max_value=2 * np.pi),
       depth=st.floats(min_value=0.3, max_value=30.0))
@hsettings(max_examples=60, deadline=None)
def test_unproject_inverts_project(theta, phi, depth):
    cam = _rig_camera()
    ray = np.array([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)])
    pixels, in_fov = cam.project(depth * ray)
    assert bool(in_fov)
    np.testing.assert_allclose(cam.unproject(pixels), ray, atol=1e-8)


def test_project_jacobian_matches_finite_differences():
    cam = _rig_camera()
    rng = np.random.default_rng(0)
    points = np.column_stack([rng.uniform(-2, 2, 8), rng.uniform(-2, 2, 8), rng.uniform(0.5, 3, 8)])
    points[0] = [0.0, 0.0, 2.0]
    J = cam.project_jacobian(points)
    h = 1e-6
    for axis in range(3):
        step = np.zeros(3)
        step[axis] = h
        fd = (cam.project(points + step)[0] - cam.project(points - step)[0]) / (2 * h)
        np.testing.assert_allclose(J[:, :, axis], fd, rtol=1e-5, atol=1e-5)


def test_unproject_outside_valid_cone_raises(pinhole_like_camera):
    """归一化半径超过 d(θ_max) 的像素无法反投影"""
    with pytest.raises(UnprojectionError) as exc:
        pinhole_like_camera.unproject(np.array([[320.0 + 100.0 * 2.0, 240.0]]))
    assert exc.value.error_code == "NEWTON_DIVERGED"
    assert exc.value.pixel is not None


def test_unproject_with_mask_flags_instead_of_raising(pinhole_like_camera):
    pixels = np.array([[320.0, 240.0], [320.0 + 100.0 * 2.0, 240.0]])
    rays, valid = pinhole_like_camera.unproject_with_mask(pixels)
    assert valid.tolist() == [True, False]
    np.testing.assert_allclose(rays[0], [0.0, 0.0, 1.0])


def test_non_monotonic_distortion_is_rejected():
    with pytest.raises(CameraModelError) as exc:
        FisheyeIntrinsics(fx=100.0, fy=100.0, cx=10.0, cy=10.0, k=(-0.5, 0.0, 0.0, 0.0))
    assert exc.value.error_code == "NON_MONOTONIC"


def test_narrow_field_of_view_is_rejected():
    with pytest.raises(CameraModelError):
        FisheyeIntrinsics(fx=100.0, fy=100.0, cx=10.0, cy=10.0, max_half_fov_deg=80.0)


def test_principal_point_outside_image_is_rejected():
    with pytest.raises(CameraModelError):
        FisheyeIntrinsics(fx=100.0, fy=100.0, cx=400.0, cy=10.0, width=320, height=240)


@given(q=quaternions, t=translations)
@hsettings(max_examples=50, deadline=None)
def test_pose_inverse_round_trip(q, t):
    pose = Pose(q, t)
    points = np.array([[1.0, 2.0, 3.0], [-4.0, 0.5, 0.0]])
    np.testing.assert_allclose(pose.inverse_transform(pose.transform(points)), points, atol=1e-9)
    np.testing.assert_allclose(pose.inverse().transform(pose.transform(points)), points, atol=1e-9)
    np.testing.assert_allclose(pose.transform(pose.center), 0.0, atol=1e-9)


@given(q1=quaternions, t1=translations, q2=quaternions, t2=translations)
@hsettings(max_examples=50, deadline=None)
def test_pose_compose_applies_right_operand_first(q1, t1, q2, t2):
    a, b = Pose(q1, t1), Pose(q2, t2)
    points = np.array([[0.3, -1.0, 2.0]])
    np.testing.assert_allclose(a.compose(b).transform(points), a.transform(b.transform(points)), atol=1e-9)


@given(q=quaternions)
@hsettings(max_examples=50, deadline=None)
def test_rotation_matrix_round_trip(q):
    q = np.asarray(q) / np.linalg.norm(q)
    R = quat_to_rotmat(q)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)
    np.testing.assert_allclose(quat_to_rotmat(rotmat_to_quat(R)), R, atol=1e-9)


def test_quat_multiply_matches_matrix_product():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=4), rng.normal(size=4)
    a, b = a / np.linalg.norm(a), b / np.linalg.norm(b)
    np.testing.assert_allclose(quat_to_rotmat(quat_multiply(a, b)), quat_to_rotmat(a) @ quat_to_rotmat(b),
                               atol=1e-12)


def test_quat_to_rotmat_backward_matches_finite_differences():
    """四元数未归一化时的梯度（内部归一化也要被正确求导）"""
    rng = np.random.default_rng(2)
    q = rng.normal(size=4) * 1.7
    G = rng.normal(size=(3, 3))
    analytic = quat_to_rotmat_backward(q, G)
    h = 1e-6
    for i in range(4):
        step = np.zeros(4)
        step[i] = h
        fd = (np.sum(quat_to_rotmat(q + step) * G) - np.sum(quat_to_rotmat(q - step) * G)) / (2 * h)
        assert analytic[i] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_look_at_pose_points_optical_axis():
    pose = look_at_pose((2.0, 0.0, 0.8), yaw_deg=0.0, pitch_down_deg=35.0)
    np.testing.assert_allclose(pose.center, [2.0, 0.0, 0.8], atol=1e-12)
    ahead = pose.transform(np.array([2.0 + np.cos(np.radians(35.0)), 0.0, 0.8 - np.sin(np.radians(35.0))]))
    np.testing.assert_allclose(ahead, [0.0, 0.0, 1.0], atol=1e-12)


def test_default_rig_layout():
    rig = default_rig(640, 480)
    assert [c.name for c in rig] == ['front', 'rear', 'left', 'right']
    assert rig[0].intrinsics.fx == pytest.approx(170.0)
    # 前视相机看得到车头前方地面，后视相机看得到车尾后方地面
    front_ground = rig[0].pose.transform(np.array([5.0, 0.0, 0.0]))
    rear_ground = rig[1].pose.transform(np.array([-5.0, 0.0, 0.0]))
    assert front_ground[2] > 0 and rear_ground[2] > 0
    assert rig[2].pose.transform(np.array([1.0, 4.0, 0.0]))[2] > 0


def test_calibration_round_trip(tmp_path):
    path = str(tmp_path / 'calib.json')
    rig = default_rig(128, 96)
    save_calibration(path, rig)
    loaded = load_calibration(path)
    assert [c.name for c in loaded] == [c.name for c in rig]
    for a, b in zip(loaded, rig):
        assert a.intrinsics == b.intrinsics
        np.testing.assert_allclose(a.pose.R, b.pose.R, atol=1e-15)
        np.testing.assert_allclose(a.pose.t, b.pose.t, atol=1e-15)


def test_calibration_missing_field(tmp_path):
    path = tmp_path / 'calib.json'
    path.write_text('{"cameras": [{"name": "front", "fx": 100}]}', encoding='utf-8')
    with pytest.raises(DataFormatError) as exc:
        load_calibration(str(path))
    assert exc.value.error_code == "BAD_CALIB"
