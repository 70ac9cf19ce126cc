"""
IPM 网格、融合 warp 及其伴随、BEV 权重反投影测试
"""

import numpy as np
import pytest
from hypothesis import given, settings as hsettings, strategies as st

from common.exceptions import ConfigurationError, DataFormatError, ShapeMismatchError
from core.camera import default_rig
from core.ipm import IpmConfig, backproject_weights, bilinear_stencil, build_grid, warp, warp_backward
from core.storage import load_grid, save_grid

from conftest import SMALL_IPM, SMALL_SIZE


def test_k_ipm_matrix():
    cfg = IpmConfig()
    np.testing.assert_allclose(cfg.K_ipm, [[0.0, -100.0, 159.5], [-100.0, 0.0, 199.5], [0.0, 0.0, 1.0]])


@pytest.mark.parametrize("xy, uv", [((0.0, 0.0), (159.5, 199.5)),
                                    ((1.0, 0.0), (159.5, 99.5)),
                                    ((0.0, 1.0), (59.5, 199.5))])
def test_ground_to_bev_axes(xy, uv):
    """车头朝 BEV 图像上方，车体左侧在图像左方"""
    cfg = IpmConfig()
    np.testing.assert_allclose(cfg.ground_to_bev(np.array(xy)), uv)
    np.testing.assert_allclose(cfg.bev_to_ground(np.array(uv)), xy, atol=1e-12)


def test_invalid_configs():
    with pytest.raises(ConfigurationError) as exc:
        IpmConfig(fusion_mode='average')
    assert exc.value.error_code == "BAD_FUSION_MODE"
    with pytest.raises(ConfigurationError):
        IpmConfig(px_per_m=0.0)
    with pytest.raises(ConfigurationError) as exc:
        build_grid([], IpmConfig())
    assert exc.value.error_code == "NO_CAMERAS"


def test_bilinear_stencil_weights():
    cols, w = bilinear_stencil(np.array([[1.25, 2.5], [3.0, 3.0]]), 4, 4)
    np.testing.assert_allclose(w.sum(axis=1), 1.0)
    np.testing.assert_allclose(w[0], [0.375, 0.125, 0.375, 0.125])
    assert cols[0].tolist() == [9, 10, 13, 14]
    # 右下角：越界邻点权重为 0
    assert w[1, 0] == 1.0 and cols[1, 0] == 15


@pytest.mark.parametrize("mode", ['nearest', 'feathered'])
def test_fusion_weights_are_normalized(small_rig, mode):
    grid = build_grid(small_rig, IpmConfig(8.0, 64, 64, fusion_mode=mode))
    total = grid.weights.sum(axis=0)
    assert grid.valid.mean() > 0.5
    np.testing.assert_allclose(total[grid.valid], 1.0)
    assert np.all(grid.weights >= 0)
    if mode == 'nearest':
        assert set(np.unique(grid.weights)) <= {0.0, 1.0}


def test_camera_ids_follow_rig_layout(small_grid):
    ids = small_grid.camera_ids
    # BEV 上方是车头（前视相机），下方是车尾（后视相机）
    assert ids[2, 32] == 0
    assert ids[61, 32] == 1
    assert ids[32, 2] == 2
    assert ids[32, 61] == 3


def test_grid_agrees_with_direct_projection(small_rig, small_grid, small_ipm):
    rng = np.random.default_rng(0)
    valid = np.argwhere(small_grid.valid)
    for v, u in valid[rng.choice(len(valid), size=25, replace=False)]:
        c = small_grid.camera_ids[v, u]
        cam = small_rig[c]
        x, y = small_ipm.bev_to_ground(np.array([u, v], dtype=float))
        pixel, in_fov = cam.project(cam.pose.transform(np.array([x, y, 0.0])))
        assert bool(in_fov)
        np.testing.assert_allclose(small_grid.source_uv[c, v, u], pixel, atol=1e-9)


def test_constant_images_warp_to_constant(small_rig, small_grid):
    images = [np.full((48, 64, 3), 0.7) for _ in small_rig]
    bev = warp(small_grid, images)
    assert bev.shape == (64, 64, 3)
    np.testing.assert_allclose(bev[small_grid.valid], 0.7)
    np.testing.assert_array_equal(bev[~small_grid.valid], 0.0)


def test_warp_is_linear_and_backward_is_its_adjoint(small_rig, small_grid):
    rng = np.random.default_rng(1)
    a = [rng.uniform(size=(48, 64, 3)) for _ in small_rig]
    b = [rng.uniform(size=(48, 64, 3)) for _ in small_rig]
    np.testing.assert_allclose(warp(small_grid, [2.0 * x + y for x, y in zip(a, b)]),
                               2.0 * warp(small_grid, a) + warp(small_grid, b), atol=1e-12)
    g = rng.normal(size=(64, 64, 3))
    lhs = float(np.sum(warp(small_grid, a) * g))
    rhs = sum(float(np.sum(x * y)) for x, y in zip(a, warp_backward(small_grid, g)))
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_warp_rejects_bad_inputs(small_rig, small_grid):
    with pytest.raises(ShapeMismatchError) as exc:
        warp(small_grid, [np.zeros((48, 64, 3))] * 3)
    assert exc.value.error_code == "BAD_IMAGE_COUNT"
    with pytest.raises(ShapeMismatchError) as exc:
        warp(small_grid, [np.zeros((40, 64, 3))] * 4)
    assert exc.value.error_code == "BAD_IMAGE_SIZE"


def test_backprojected_weights_stay_in_unit_range(small_rig, small_grid):
    w_bev = np.random.default_rng(2).uniform(size=(64, 64))
    masks = backproject_weights(small_grid, w_bev)
    assert len(masks) == 4
    for mask in masks:
        assert mask.shape == (48, 64)
        assert mask.min() >= 0.0 and mask.max() <= 1.0


def test_backprojected_constant_covers_ground_pixels(small_grid):
    masks = backproject_weights(small_grid, np.ones((64, 64)))
    front = masks[0]
    # 前视相机下半幅看到地面，上半幅看到天空
    assert front[40, 32] == pytest.approx(1.0)
    assert front[0, 32] == 0.0


def test_backproject_rejects_bad_shape(small_grid):
    with pytest.raises(ShapeMismatchError) as exc:
        backproject_weights(small_grid, np.ones((10, 10)))
    assert exc.value.error_code == "BAD_WEIGHT_SHAPE"


def test_grid_cache_round_trip(tmp_path, small_rig, small_grid, small_ipm):
    path = str(tmp_path / 'grid.pgip')
    save_grid(small_grid, path)
    loaded = load_grid(path, small_rig, small_ipm)
    np.testing.assert_allclose(loaded.source_uv, small_grid.source_uv, atol=1e-4)
    np.testing.assert_array_equal(loaded.valid, small_grid.valid)
    with pytest.raises(ShapeMismatchError) as exc:
        load_grid(path, small_rig, IpmConfig(8.0, 32, 64))
    assert exc.value.error_code == "GRID_MISMATCH"
    wrong = tmp_path / 'scene.pgip'
    wrong.write_bytes(b'PGSC' + open(path, 'rb').read()[4:])
    with pytest.raises(DataFormatError) as exc:
        load_grid(str(wrong), small_rig, small_ipm)
    assert exc.value.error_code == "BAD_MAGIC"


_GRID = []


def _shared_grid():
    if not _GRID:
        _GRID.append(build_grid(default_rig(*SMALL_SIZE), IpmConfig(**SMALL_IPM, fusion_mode='feathered')))
    return _GRID[0]


@given(a=st.floats(min_value=-3.0, max_value=3.0), b=st.floats(min_value=-3.0, max_value=3.0),
       seed=st.integers(min_value=0, max_value=2 ** 16))
@hsettings(max_examples=25, deadline=None)
def test_warp_linearity_property(a, b, seed):
    grid = _shared_grid()
    rng = np.random.default_rng(seed)
    x = [rng.uniform(size=(48, 64, 3)) for _ in range(4)]
    y = [rng.uniform(size=(48, 64, 3)) for _ in range(4)]
    lhs = warp(grid, [a * u + b * v for u, v in zip(x, y)])
    np.testing.assert_allclose(lhs, a * warp(grid, x) + b * warp(grid, y), atol=1e-10)
