"""
高斯场景测试：协方差、球谐颜色、初始化与持久化
"""

import numpy as np
import pytest
from hypothesis import given, settings as hsettings, strategies as st

from common.exceptions import ConfigurationError, DataFormatError, DatasetError
from core.scene import (SH_C0, GaussianScene, PointSource, covariance, eval_color, init_scene,
                        nearest_neighbor_scale, sh_basis, sh_basis_count, sh_basis_gradient)
from core.storage import load_scene, load_training_state, save_scene, save_training_state

finite = st.floats(min_value=-2.0, max_value=2.0, allow_nan=False)


def test_covariance_axis_aligned():
    sigma = covariance(np.array([1.0, 0.0, 0.0, 0.0]), np.log([2.0, 1.0, 1.0]))
    np.testing.assert_allclose(sigma, np.diag([4.0, 1.0, 1.0]), atol=1e-12)


def test_covariance_ignores_quaternion_scale():
    q = np.array([0.3, -0.2, 0.9, 0.1])
    s = np.array([0.1, -0.4, 0.7])
    np.testing.assert_allclose(covariance(q, s), covariance(5.0 * q, s), atol=1e-12)


@given(q=st.tuples(finite, finite, finite, finite).filter(lambda q: np.linalg.norm(q) > 0.1),
       s=st.tuples(finite, finite, finite))
@hsettings(max_examples=80, deadline=None)
def test_covariance_symmetric_positive_definite(q, s):
    sigma = covariance(np.asarray(q), np.asarray(s))
    assert np.array_equal(sigma, sigma.T)
    eig = np.linalg.eigvalsh(sigma)
    assert eig.min() > 0
    np.testing.assert_allclose(np.sort(eig), np.sort(np.exp(2 * np.asarray(s))), rtol=1e-9)


@pytest.mark.parametrize("c", [-1.0, 0.0, 0.4, 1.2])
def test_dc_color(c):
    coeffs = np.full((1, 3), c)
    color = eval_color(coeffs, np.array([0.0, 0.0, 1.0]))
    np.testing.assert_allclose(color, max(c * 0.28209479177387814 + 0.5, 0.0))


def test_negative_color_is_clamped():
    color = eval_color(np.full((1, 3), -10.0), np.array([1.0, 0.0, 0.0]))
    np.testing.assert_array_equal(color, 0.0)


def test_sh_basis_count_and_constant_term():
    dirs = np.array([[0.0, 0.0, 1.0], [0.6, 0.8, 0.0]])
    for degree in range(4):
        basis = sh_basis(dirs, degree)
        assert basis.shape == (2, sh_basis_count(degree))
        np.testing.assert_allclose(basis[:, 0], SH_C0)


def test_sh_degree_out_of_range():
    with pytest.raises(ConfigurationError):
        sh_basis(np.array([0.0, 0.0, 1.0]), 4)


def test_sh_basis_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    dirs = rng.normal(size=(5, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    grad = sh_basis_gradient(dirs, 3)
    h = 1e-6
    for axis in range(3):
        step = np.zeros(3)
        step[axis] = h
        fd = (sh_basis(dirs + step, 3) - sh_basis(dirs - step, 3)) / (2 * h)
        np.testing.assert_allclose(grad[..., axis], fd, atol=1e-7)


def test_empty_scene_is_rejected():
    with pytest.raises(DatasetError):
        GaussianScene(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 1, 3)),
                      sh_degree=0)


def test_scene_shape_is_validated():
    with pytest.raises(DatasetError) as exc:
        GaussianScene(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 3)), np.zeros(2), np.zeros((2, 4, 3)),
                      sh_degree=2)
    assert exc.value.error_code == "BAD_SCENE"


def test_init_scene_is_deterministic():
    a = init_scene(None, 64, seed=5)
    b = init_scene(None, 64, seed=5)
    c = init_scene(None, 64, seed=6)
    for name in a.parameters():
        assert np.array_equal(a.parameters()[name], b.parameters()[name])
    assert not np.array_equal(a.means, c.means)


def test_init_scene_reproduces_point_colors():
    rng = np.random.default_rng(1)
    points = rng.uniform(-1, 1, (40, 3))
    colors = rng.uniform(0, 1, (40, 3))
    scene = init_scene(PointSource(points, colors), 100, sh_degree=2, init_opacity=0.1)
    assert scene.count == 40
    np.testing.assert_allclose(scene.opacities, 0.1)
    np.testing.assert_allclose(eval_color(scene.sh_coeffs, np.array([0.0, 1.0, 0.0])), colors, atol=1e-12)
    np.testing.assert_allclose(scene.quats, np.tile([1.0, 0.0, 0.0, 0.0], (40, 1)))


def test_init_scene_subsamples_large_sources():
    points = np.random.default_rng(2).uniform(-1, 1, (500, 3))
    scene = init_scene(PointSource(points), 100)
    assert scene.count == 100


def test_init_scene_rejects_non_positive_count():
    with pytest.raises(ConfigurationError):
        init_scene(None, 0)


def test_nearest_neighbor_scale():
    points = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]])
    np.testing.assert_allclose(nearest_neighbor_scale(points, k=1), [1.0, 1.0, 2.0])
    np.testing.assert_allclose(nearest_neighbor_scale(points[:1]), [1.0])


def test_renormalize_resets_degenerate_quaternions():
    scene = init_scene(None, 3, seed=0)
    scene.quats[0] = 0.0
    scene.quats[1] = [2.0, 0.0, 0.0, 0.0]
    scene.renormalize_quaternions()
    np.testing.assert_allclose(scene.quats[:2], [[1.0, 0.0, 0.0, 0.0]] * 2)
    np.testing.assert_allclose(np.linalg.norm(scene.quats, axis=1), 1.0)


def test_copy_and_subset_are_independent():
    scene = init_scene(None, 10, seed=0)
    clone = scene.copy()
    clone.means += 1.0
    assert not np.array_equal(scene.means, clone.means)
    part = scene.subset(np.array([1, 3]))
    assert part.count == 2
    np.testing.assert_array_equal(part.means, scene.means[[1, 3]])


def test_pgsc_round_trip_is_float32_exact(tmp_path):
    scene = init_scene(None, 25, sh_degree=2, seed=4)
    scene.sh_coeffs[:] = np.random.default_rng(0).normal(size=scene.sh_coeffs.shape)
    path = str(tmp_path / 'scene.pgsc')
    save_scene(scene, path)
    loaded = load_scene(path)
    assert loaded.sh_degree == 2 and loaded.count == 25
    for name, arr in scene.parameters().items():
        np.testing.assert_array_equal(loaded.parameters()[name], arr.astype(np.float32).astype(np.float64))


def test_pgsc_bad_magic(tmp_path):
    path = tmp_path / 'bad.pgsc'
    path.write_bytes(b'XXXX' + b'\x00' * 12)
    with pytest.raises(DataFormatError) as exc:
        load_scene(str(path))
    assert exc.value.error_code == "BAD_MAGIC"


def test_pgsc_truncated_header(tmp_path):
    path = tmp_path / 'short.pgsc'
    path.write_bytes(b'PGSC' + b'\x01\x00')
    with pytest.raises(DataFormatError) as exc:
        load_scene(str(path))
    assert exc.value.error_code == "BAD_HEADER"
    assert exc.value.details == {"path": str(path)}


def test_training_state_round_trip_is_bitwise(tmp_path):
    scene = init_scene(None, 12, seed=9)
    scene.iteration = 17
    rng = np.random.default_rng(3)
    rng.random(5)
    adam = {'step': 17, 'm': {k: np.full_like(v, 0.25) for k, v in scene.parameters().items()},
            'v': {k: np.full_like(v, 0.5) for k, v in scene.parameters().items()}}
    path = str(tmp_path / 'state.npz')
    save_training_state(path, scene, adam, rng.bit_generator.state, {'order': [2, 0, 1], 'cursor': 1})
    loaded, adam2, rng_state, extra = load_training_state(path)
    assert loaded.iteration == 17 and adam2['step'] == 17
    for name, arr in scene.parameters().items():
        assert np.array_equal(loaded.parameters()[name], arr)
    restored = np.random.default_rng()
    restored.bit_generator.state = rng_state
    assert np.array_equal(restored.random(4), rng.random(4))
    assert extra == {'order': [2, 0, 1], 'cursor': 1}
