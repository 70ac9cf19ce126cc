"""
数据持久化 (Persistence) 层

- 封装所有二进制文件的直接读写。
- 场景检查点 PGSC：{magic "PGSC", version, count, sh_degree} + 每个高斯的小端 f32 字段
  （mu 3, quat 4, log_scales 3, logit_opacity 1, sh_coeffs B×3）。
- 训练状态 .npz：全精度参数 + Adam 矩 + 迭代数 + RNG 状态，用于逐位一致地续训。
- IPM 网格缓存 PGIP：{magic "PGIP", bev_w, bev_h, n_cams} + 每项 {cam u8, u f32, v f32, w f32}。
"""
import json
import logging
import os
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from common.exceptions import DataFormatError, ShapeMismatchError
from common.utilities import read_header, write_header
from core.camera import FisheyeCamera
from core.ipm import IpmConfig, IpmGrid
from core.scene import GaussianScene, PARAM_GROUPS, sh_basis_count

logger = logging.getLogger(__name__)

PGSC_VERSION = 1
_PGIP_RECORD = np.dtype([('cam', '<u1'), ('u', '<f4'), ('v', '<f4'), ('w', '<f4')])


def save_scene(scene: GaussianScene, path: str) -> None:
    """写入 PGSC 场景检查点"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    n = scene.count
    body = np.concatenate([scene.means, scene.quats, scene.log_scales, scene.logit_opacities[:, None],
                           scene.sh_coeffs.reshape(n, -1)], axis=1)
    with open(path, 'wb') as fh:
        write_header(fh, b'PGSC', PGSC_VERSION, n, scene.sh_degree)
        fh.write(body.astype('<f4').tobytes())
    logger.info(f"场景检查点已保存: {path} ({n} 个高斯)")


def load_scene(path: str) -> GaussianScene:
    """读取 PGSC 场景检查点"""
    with open(path, 'rb') as fh:
        version, count, degree = read_header(fh, b'PGSC', path)
        if version != PGSC_VERSION:
            raise DataFormatError(f"不支持的 PGSC 版本 {version}", error_code="BAD_VERSION")
        data = np.frombuffer(fh.read(), dtype='<f4')
    width = 11 + 3 * sh_basis_count(degree)
    if data.size != count * width:
        raise ShapeMismatchError(f"PGSC 数据长度 {data.size} 与 {count}×{width} 不符", error_code="BAD_SHAPE",
                                 details={"path": path})
    body = data.reshape(count, width).astype(np.float64)
    return GaussianScene(means=body[:, 0:3], quats=body[:, 3:7], log_scales=body[:, 7:10],
                         logit_opacities=body[:, 10], sh_coeffs=body[:, 11:].reshape(count, -1, 3),
                         sh_degree=degree)


def save_training_state(path: str, scene: GaussianScene, adam_state: Dict[str, Any],
                        rng_state: Dict[str, Any], extra: Optional[Dict[str, Any]] = None) -> None:
    """
    保存完整训练状态。

    :param adam_state: {'step': int, 'm': {组名: 数组}, 'v': {组名: 数组}}
    :param rng_state: numpy Generator 的 bit_generator.state
    :param extra: 需要随状态保存的其他 JSON 信息（如帧顺序）
    """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    arrays = {f'param_{name}': arr for name, arr in scene.parameters().items()}
    for name in PARAM_GROUPS:
        arrays[f'adam_m_{name}'] = adam_state['m'][name]
        arrays[f'adam_v_{name}'] = adam_state['v'][name]
    meta = {'iteration': scene.iteration, 'sh_degree': scene.sh_degree, 'adam_step': adam_state['step'],
            'rng_state': rng_state, 'extra': extra or {}}
    arrays['meta'] = np.frombuffer(json.dumps(meta).encode('utf-8'), dtype=np.uint8)
    with open(path, 'wb') as fh:
        np.savez(fh, **arrays)


def load_training_state(path: str) -> Tuple[GaussianScene, Dict[str, Any], Dict[str, Any], Dict[str, Any]]:
    """读取训练状态，返回 (scene, adam_state, rng_state, extra)"""
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(bytes(data['meta']).decode('utf-8'))
            params = {name: data[f'param_{name}'].copy() for name in PARAM_GROUPS}
            m = {name: data[f'adam_m_{name}'].copy() for name in PARAM_GROUPS}
            v = {name: data[f'adam_v_{name}'].copy() for name in PARAM_GROUPS}
    except (KeyError, ValueError, OSError) as e:
        raise DataFormatError(f"训练状态文件损坏: {path}: {e}", error_code="BAD_STATE",
                              details={"path": path}) from e
    scene = GaussianScene(sh_degree=meta['sh_degree'], iteration=meta['iteration'], **params)
    return scene, {'step': meta['adam_step'], 'm': m, 'v': v}, meta['rng_state'], meta.get('extra', {})


def save_grid(grid: IpmGrid, path: str) -> None:
    """写入 PGIP 网格缓存（相机主序，每个 BEV 像素一条记录）"""
    C = len(grid.cameras)
    H, W = grid.config.shape
    records = np.empty(C * H * W, dtype=_PGIP_RECORD)
    records['cam'] = np.repeat(np.arange(C, dtype=np.uint8), H * W)
    records['u'] = grid.source_uv[..., 0].reshape(-1)
    records['v'] = grid.source_uv[..., 1].reshape(-1)
    records['w'] = grid.weights.reshape(-1)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'wb') as fh:
        write_header(fh, b'PGIP', W, H, C)
        fh.write(records.tobytes())
    logger.info(f"IPM 网格缓存已保存: {path}")


def load_grid(path: str, cameras: Sequence[FisheyeCamera], config: IpmConfig) -> IpmGrid:
    """读取 PGIP 网格缓存，并校验与当前标定/配置一致"""
    with open(path, 'rb') as fh:
        W, H, C = read_header(fh, b'PGIP', path)
        records = np.frombuffer(fh.read(), dtype=_PGIP_RECORD)
    if (H, W) != config.shape or C != len(cameras) or records.size != C * H * W:
        raise ShapeMismatchError(f"PGIP 网格 {W}x{H}x{C} 与配置 {config.bev_width}x{config.bev_height}x{len(cameras)} 不符",
                                 error_code="GRID_MISMATCH", details={"path": path})
    uv = np.stack([records['u'], records['v']], axis=-1).astype(np.float64).reshape(C, H, W, 2)
    weights = records['w'].astype(np.float64).reshape(C, H, W)
    return IpmGrid(config=config, cameras=list(cameras), source_uv=uv, weights=weights)
