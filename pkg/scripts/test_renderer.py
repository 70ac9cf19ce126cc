"""
UT 投影与光栅化测试
"""

import numpy as np
import pytest

from common.exceptions import CholeskyError, ConfigurationError, ShapeMismatchError
from core.camera import Pose
from core.renderer import (RenderConfig, UtParams, rasterize, rasterize_backward, render_views, sigma_points,
                           ut_project, ut_transform)
from services.dataset import vehicle_pose

from conftest import make_scene


def test_sigma_points_for_identity_covariance():
    sp = sigma_points(np.zeros(3), np.eye(3))
    assert sp.points.shape == (7, 3)
    np.testing.assert_allclose(sp.points[0], 0.0)
    np.testing.assert_allclose(sp.points[1:4], np.sqrt(3.0) * np.eye(3), atol=1e-12)
    np.testing.assert_allclose(sp.points[4:7], -np.sqrt(3.0) * np.eye(3), atol=1e-12)
    np.testing.assert_allclose(sp.mean_weights, [0.0] + [1.0 / 6.0] * 6)
    assert sp.cov_weights[0] == pytest.approx(2.0)
    np.testing.assert_allclose(sp.cov_weights[1:], 1.0 / 6.0)


def test_sigma_points_reconstruct_moments():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(3, 3))
    sigma = A @ A.T + 0.1 * np.eye(3)
    mu = rng.normal(size=3)
    mean, cov = sigma_points(mu, sigma).reconstruct()
    np.testing.assert_allclose(mean, mu, atol=1e-12)
    np.testing.assert_allclose(cov, sigma, atol=1e-10)


def test_ut_is_exact_for_affine_maps():
    rng = np.random.default_rng(1)
    for _ in range(100):
        A = rng.normal(size=(2, 3))
        b = rng.normal(size=2)
        L = rng.normal(size=(3, 3))
        sigma = L @ L.T + 1e-3 * np.eye(3)
        mu = rng.normal(size=3)
        mean, cov = ut_transform(mu, sigma, lambda X: X @ A.T + b)
        np.testing.assert_allclose(mean, A @ mu + b, atol=1e-10)
        np.testing.assert_allclose(cov, A @ sigma @ A.T, atol=1e-9)


def test_zero_covariance_collapses_to_mean():
    mu = np.array([0.5, -1.0, 2.0])
    sp = sigma_points(mu, np.zeros((3, 3)))
    np.testing.assert_allclose(sp.points, np.tile(mu, (7, 1)))


def test_indefinite_covariance_is_rejected():
    with pytest.raises(CholeskyError) as exc:
        sigma_points(np.zeros(3), np.diag([1.0, -1.0, 1.0]))
    assert exc.value.error_code == "NOT_PSD"


def test_covariance_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        sigma_points(np.zeros(3), np.eye(2))


def test_degenerate_ut_parameters_are_rejected():
    with pytest.raises(ConfigurationError) as exc:
        UtParams(kappa=-3.0).weights(3)
    assert exc.value.error_code == "BAD_UT_PARAMS"


def test_ut_projection_agrees_with_monte_carlo(small_camera):
    scene = make_scene([[0.5, 0.3, 3.0]], [[0.5, 0.5, 0.5]], log_scale=np.log(0.1))
    splat = ut_project(scene.primitive(0), small_camera, low_pass=0.0)
    assert splat is not None
    rng = np.random.default_rng(2)
    samples = rng.multivariate_normal(scene.means[0], scene.primitive(0).covariance, size=40000)
    pixels, _ = small_camera.project(samples)
    np.testing.assert_allclose(splat.mean2d, pixels.mean(axis=0), atol=0.02)
    np.testing.assert_allclose(splat.cov2d, np.cov(pixels.T), rtol=0.05, atol=0.01)


def test_ut_project_culls_gaussians_outside_the_cone(small_camera):
    scene = make_scene([[0.0, 0.0, -3.0]], [[0.5, 0.5, 0.5]])
    assert ut_project(scene.primitive(0), small_camera) is None


def test_single_gaussian_center_pixel(small_camera):
    scene = make_scene([[0.0, 0.0, 3.0]], [[0.8, 0.2, 0.4]])
    view = rasterize(scene, small_camera, RenderConfig(background=(0.1, 0.1, 0.1)))
    o = 1.0 / (1.0 + np.exp(-4.0))
    expected = o * np.array([0.8, 0.2, 0.4]) + (1.0 - o) * 0.1
    np.testing.assert_allclose(view.rgb[24, 32], expected, rtol=1e-9)
    assert view.alpha[24, 32] == pytest.approx(o, rel=1e-9)
    # 远离 splat 的像素只剩背景
    np.testing.assert_allclose(view.rgb[0, 0], 0.1)


def test_empty_view_is_background(small_camera):
    scene = make_scene([[0.0, 0.0, -3.0]], [[0.8, 0.2, 0.4]])
    view = rasterize(scene, small_camera, RenderConfig(background=(0.2, 0.3, 0.4)))
    assert view.projected.count == 0
    np.testing.assert_allclose(view.rgb, np.broadcast_to([0.2, 0.3, 0.4], view.rgb.shape))
    np.testing.assert_array_equal(view.alpha, 0.0)
    grads = rasterize_backward(view, np.ones_like(view.rgb))
    assert grads.max_abs() == 0.0


def test_nearer_gaussian_dominates(small_camera):
    scene = make_scene([[0.0, 0.0, 4.0], [0.0, 0.0, 2.0]], [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]],
                       log_scale=np.log(0.2), logit_opacity=8.0)
    view = rasterize(scene, small_camera)
    assert view.projected.index.tolist() == [1, 0]
    r, g, _ = view.rgb[24, 32]
    assert r > 0.99 and g < 0.01


def test_image_is_clipped_float32(small_camera):
    scene = make_scene([[0.0, 0.0, 3.0]], [[1.6, 0.5, 0.5]])
    view = rasterize(scene, small_camera)
    assert view.rgb.max() > 1.0
    img = view.image()
    assert img.dtype == np.float32 and img.max() <= 1.0


def test_threaded_rendering_is_bitwise_identical(random_scene, small_camera):
    serial = rasterize(random_scene, small_camera, RenderConfig(tile_size=8, threads=1))
    threaded = rasterize(random_scene, small_camera, RenderConfig(tile_size=8, threads=4))
    assert np.array_equal(serial.rgb, threaded.rgb)
    g = np.random.default_rng(0).normal(size=serial.rgb.shape)
    a = rasterize_backward(serial, g)
    b = rasterize_backward(threaded, g)
    for name, arr in a.as_dict().items():
        assert np.array_equal(arr, b.as_dict()[name])


def test_rendering_is_invariant_to_rig_translation(small_rig):
    rng = np.random.default_rng(4)
    n = 60
    means = np.column_stack([rng.uniform(-4, 5, n), rng.uniform(-3, 3, n), rng.uniform(0.0, 0.3, n)])
    scene = make_scene(means, rng.uniform(0, 1, (n, 3)), log_scale=np.log(0.2), logit_opacity=1.0)
    shifted = scene.copy()
    shifted.means += [3.0, -2.0, 0.0]
    base = render_views(scene, small_rig)
    moved = render_views(shifted, small_rig, rig_pose=vehicle_pose(3.0, -2.0, 0.0))
    for a, b in zip(base, moved):
        np.testing.assert_allclose(a.rgb, b.rgb, atol=1e-8)


def _loss(scene, camera, G, pose=None, config=RenderConfig(tile_size=8)):
    return float(np.sum(rasterize(scene, camera, config, pose).rgb * G))


def test_rasterize_backward_matches_finite_differences(random_scene, small_camera):
    config = RenderConfig(tile_size=8, background=(0.2, 0.1, 0.3))
    view = rasterize(random_scene, small_camera, config)
    G = np.random.default_rng(5).normal(size=view.rgb.shape)
    grads = rasterize_backward(view, G).as_dict()
    h = 1e-6
    rng = np.random.default_rng(6)
    for name, arr in random_scene.parameters().items():
        for flat in rng.choice(arr.size, size=4, replace=False):
            idx = np.unravel_index(flat, arr.shape)
            plus, minus = random_scene.copy(), random_scene.copy()
            plus.parameters()[name][idx] += h
            minus.parameters()[name][idx] -= h
            fd = (_loss(plus, small_camera, G, config=config) - _loss(minus, small_camera, G, config=config)) / (2 * h)
            assert grads[name][idx] == pytest.approx(fd, rel=1e-4, abs=1e-6), (name, idx)


def test_pose_gradient_matches_finite_differences(random_scene, small_camera):
    pose = Pose((0.99, 0.05, -0.03, 0.02), (0.1, -0.05, 0.2))
    view = rasterize(random_scene, small_camera, RenderConfig(tile_size=8), pose)
    G = np.random.default_rng(7).normal(size=view.rgb.shape)
    grads = rasterize_backward(view, G, with_pose=True)
    h = 1e-6
    q, t = np.asarray(pose.rotation), np.asarray(pose.translation)
    for i in range(3):
        step = np.zeros(3)
        step[i] = h
        fd = (_loss(random_scene, small_camera, G, Pose(tuple(q), tuple(t + step)))
              - _loss(random_scene, small_camera, G, Pose(tuple(q), tuple(t - step)))) / (2 * h)
        assert grads.pose_translation[i] == pytest.approx(fd, rel=1e-4, abs=1e-6)
    for i in range(4):
        step = np.zeros(4)
        step[i] = h
        fd = (_loss(random_scene, small_camera, G, Pose(tuple(q + step), tuple(t)))
              - _loss(random_scene, small_camera, G, Pose(tuple(q - step), tuple(t)))) / (2 * h)
        assert grads.pose_rotation[i] == pytest.approx(fd, rel=1e-4, abs=1e-6)


def test_backward_rejects_wrong_gradient_shape(random_scene, small_camera):
    view = rasterize(random_scene, small_camera)
    with pytest.raises(ShapeMismatchError):
        rasterize_backward(view, np.zeros((4, 4, 3)))
