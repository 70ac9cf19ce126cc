"""
可微逆透视映射 (IPM)

- BEV 坐标系：车体系 x 前、y 左、z 上，地面 z=0，车辆位于 BEV 图像中心。
  K_ipm = [[0, -s, cu], [-s, 0, cv], [0, 0, 1]]，s 为 像素/米。
- build_grid 只依赖标定：对每个 BEV 像素求地面点，投影到各相机，按融合模式分配权重。
- warp 是关于输入图像的线性算子（稀疏双线性矩阵），其伴随 warp_backward 为转置。
- backproject_weights 把 BEV 权重图采样回每路鱼眼像素（射线与地面求交，λ = −h/r_z）。
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

from common.exceptions import ConfigurationError, ShapeMismatchError
from core.camera import FisheyeCamera

logger = logging.getLogger(__name__)

FUSION_NEAREST = 'nearest'
FUSION_FEATHERED = 'feathered'


@dataclass(frozen=True)
class IpmConfig:
    px_per_m: float = 100.0
    bev_width: int = 320
    bev_height: int = 400
    fusion_mode: str = FUSION_NEAREST

    def __post_init__(self):
        if self.fusion_mode not in (FUSION_NEAREST, FUSION_FEATHERED):
            raise ConfigurationError(f"未知融合模式: {self.fusion_mode}", error_code="BAD_FUSION_MODE")
        if self.px_per_m <= 0 or self.bev_width <= 0 or self.bev_height <= 0:
            raise ConfigurationError("BEV 尺寸与分辨率必须为正", error_code="BAD_IPM_CONFIG")

    @classmethod
    def from_settings(cls, settings) -> 'IpmConfig':
        s = settings.ipm
        return cls(px_per_m=s.px_per_m, bev_width=s.bev_width, bev_height=s.bev_height,
                   fusion_mode=s.fusion_mode)

    @property
    def K_ipm(self) -> np.ndarray:
        s = self.px_per_m
        return np.array([[0.0, -s, (self.bev_width - 1) / 2.0],
                         [-s, 0.0, (self.bev_height - 1) / 2.0],
                         [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> Tuple[int, int]:
        return self.bev_height, self.bev_width

    def ground_to_bev(self, xy: np.ndarray) -> np.ndarray:
        """车体系地面点 (..., 2) 米 → BEV 像素 (..., 2)"""
        xy = np.asarray(xy, dtype=np.float64)
        homo = np.concatenate([xy, np.ones(xy.shape[:-1] + (1,))], axis=-1)
        uvw = homo @ self.K_ipm.T
        return uvw[..., :2] / uvw[..., 2:]

    def bev_to_ground(self, uv: np.ndarray) -> np.ndarray:
        """BEV 像素 (..., 2) → 车体系地面点 (..., 2) 米"""
        uv = np.asarray(uv, dtype=np.float64)
        homo = np.concatenate([uv, np.ones(uv.shape[:-1] + (1,))], axis=-1)
        xyw = homo @ np.linalg.inv(self.K_ipm).T
        return xyw[..., :2] / xyw[..., 2:]

    def pixel_centers(self) -> np.ndarray:
        """(H, W, 2) 的 BEV 像素中心坐标 (u, v)"""
        v, u = np.mgrid[0:self.bev_height, 0:self.bev_width]
        return np.stack([u, v], axis=-1).astype(np.float64)


def bilinear_stencil(uv: np.ndarray, width: int, height: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    双线性 4 点模板。

    :param uv: (N, 2) 采样坐标，须位于 [0, w-1]×[0, h-1]
    :return: (列索引 (N, 4), 权重 (N, 4))；越界的邻点权重为 0 且索引被截断
    """
    u0 = np.floor(uv[:, 0]).astype(np.int64)
    v0 = np.floor(uv[:, 1]).astype(np.int64)
    fu = uv[:, 0] - u0
    fv = uv[:, 1] - v0
    u1 = np.minimum(u0 + 1, width - 1)
    v1 = np.minimum(v0 + 1, height - 1)
    cols = np.stack([v0 * width + u0, v0 * width + u1, v1 * width + u0, v1 * width + u1], axis=1)
    weights = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], axis=1)
    return cols, weights


@dataclass
class IpmGrid:
    """
    BEV 像素 → (相机, 源像素, 融合权重) 的对应关系。

    source_uv: (C, H, W, 2)，weights: (C, H, W)；无效项权重为 0。
    """
    config: IpmConfig
    cameras: List[FisheyeCamera]
    source_uv: np.ndarray
    weights: np.ndarray
    _warp_op: Optional[sparse.csr_matrix] = field(default=None, repr=False)
    _back_ops: Dict[str, sparse.csr_matrix] = field(default_factory=dict, repr=False)

    @property
    def valid(self) -> np.ndarray:
        return self.weights.sum(axis=0) > 0

    @property
    def camera_ids(self) -> np.ndarray:
        """每个 BEV 像素权重最大的相机序号，无效为 -1"""
        ids = np.argmax(self.weights, axis=0)
        return np.where(self.valid, ids, -1)

    @property
    def source_sizes(self) -> List[int]:
        return [cam.width * cam.height for cam in self.cameras]

    def warp_operator(self) -> sparse.csr_matrix:
        """(H·W) × Σ(h_c·w_c) 的稀疏双线性融合矩阵"""
        if self._warp_op is None:
            H, W = self.config.shape
            rows, cols, vals = [], [], []
            offset = 0
            for c, cam in enumerate(self.cameras):
                pix = np.flatnonzero(self.weights[c].reshape(-1) > 0)
                uv = self.source_uv[c].reshape(-1, 2)[pix]
                stencil_cols, stencil_w = bilinear_stencil(uv, cam.width, cam.height)
                rows.append(np.repeat(pix, 4))
                cols.append((stencil_cols + offset).reshape(-1))
                vals.append((stencil_w * self.weights[c].reshape(-1)[pix, None]).reshape(-1))
                offset += cam.width * cam.height
            self._warp_op = sparse.csr_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(H * W, offset))
        return self._warp_op

    def backproject_operator(self, camera_index: int) -> sparse.csr_matrix:
        """(h·w) × (H·W) 的稀疏矩阵：鱼眼像素在 BEV 权重图上的双线性采样"""
        cam = self.cameras[camera_index]
        if cam.name not in self._back_ops:
            H, W = self.config.shape
            v, u = np.mgrid[0:cam.height, 0:cam.width]
            pixels = np.stack([u.ravel(), v.ravel()], axis=-1).astype(np.float64)
            rays, ok = cam.unproject_with_mask(pixels)
            dirs = rays @ cam.pose.R
            origin = cam.pose.center
            # 射线与地面 z=0 求交：s = −c_z / r_z
            down = dirs[:, 2] < -1e-12
            s = np.where(down, -origin[2] / np.where(down, dirs[:, 2], -1.0), -1.0)
            ground = origin[:2] + s[:, None] * dirs[:, :2]
            bev = self.config.ground_to_bev(ground)
            inside = (ok & down & (s > 0) & (bev[:, 0] >= 0) & (bev[:, 0] <= W - 1)
                      & (bev[:, 1] >= 0) & (bev[:, 1] <= H - 1))
            pix = np.flatnonzero(inside)
            stencil_cols, stencil_w = bilinear_stencil(bev[pix], W, H)
            self._back_ops[cam.name] = sparse.csr_matrix(
                (stencil_w.reshape(-1), (np.repeat(pix, 4), stencil_cols.reshape(-1))),
                shape=(cam.width * cam.height, H * W))
        return self._back_ops[cam.name]


def build_grid(cameras: Sequence[FisheyeCamera], config: IpmConfig) -> IpmGrid:
    """
    预计算 IPM 对应网格。

    :param cameras: 相机列表，位姿为 车体→相机
    :param config: IPM 配置
    :return: IpmGrid（不依赖图像，可缓存复用）
    """
    if not cameras:
        raise ConfigurationError("build_grid 至少需要一路相机", error_code="NO_CAMERAS")
    H, W = config.shape
    ground_xy = config.bev_to_ground(config.pixel_centers().reshape(-1, 2))
    ground = np.concatenate([ground_xy, np.zeros((len(ground_xy), 1))], axis=1)

    C = len(cameras)
    source_uv = np.zeros((C, H * W, 2))
    lengths = np.full((C, H * W), np.inf)
    for c, cam in enumerate(cameras):
        p_cam = cam.pose.transform(ground)
        uv, in_fov = cam.project(p_cam)
        inside = (in_fov & (uv[:, 0] >= 0) & (uv[:, 0] <= cam.width - 1)
                  & (uv[:, 1] >= 0) & (uv[:, 1] <= cam.height - 1))
        source_uv[c] = np.where(inside[:, None], uv, 0.0)
        lengths[c] = np.where(inside, np.linalg.norm(p_cam, axis=1), np.inf)

    visible = np.isfinite(lengths)
    weights = np.zeros((C, H * W))
    if config.fusion_mode == FUSION_NEAREST:
        best = np.argmin(lengths, axis=0)
        any_visible = visible.any(axis=0)
        weights[best[any_visible], np.flatnonzero(any_visible)] = 1.0
    else:
        inv = np.where(visible, 1.0 / np.where(visible, lengths, 1.0), 0.0)
        total = inv.sum(axis=0)
        weights = np.where(total > 0, inv / np.where(total > 0, total, 1.0), 0.0)

    grid = IpmGrid(config=config, cameras=list(cameras), source_uv=source_uv.reshape(C, H, W, 2),
                   weights=weights.reshape(C, H, W))
    logger.info(f"IPM 网格构建完成: {W}x{H} @ {config.px_per_m} px/m, "
                f"覆盖率 {grid.valid.mean():.1%}, 融合模式 {config.fusion_mode}")
    return grid


def _stack_sources(grid: IpmGrid, images: Sequence[np.ndarray]) -> Tuple[np.ndarray, Tuple[int, ...]]:
    if len(images) != len(grid.cameras):
        raise ShapeMismatchError(f"图像数 {len(images)} 与相机数 {len(grid.cameras)} 不符",
                                 error_code="BAD_IMAGE_COUNT")
    flat, channels = [], None
    for cam, img in zip(grid.cameras, images):
        img = np.asarray(img, dtype=np.float64)
        if img.shape[:2] != (cam.height, cam.width):
            raise ShapeMismatchError(f"{cam.name} 图像尺寸 {img.shape[:2]} 与标定 {(cam.height, cam.width)} 不符",
                                     error_code="BAD_IMAGE_SIZE", details={"camera": cam.name})
        trailing = img.shape[2:]
        if channels is None:
            channels = trailing
        elif trailing != channels:
            raise ShapeMismatchError("各路图像通道数不一致", error_code="BAD_CHANNELS")
        flat.append(img.reshape(cam.height * cam.width, -1))
    return np.concatenate(flat, axis=0), channels


def warp(grid: IpmGrid, images: Sequence[np.ndarray]) -> np.ndarray:
    """
    把各路鱼眼图像融合为 BEV 图像。

    :param images: 每路相机一张 (h, w) 或 (h, w, ch) 图像
    :return: (H, W) 或 (H, W, ch)；无效像素为 0
    """
    stacked, channels = _stack_sources(grid, images)
    out = grid.warp_operator() @ stacked
    return out.reshape(grid.config.shape + channels)


def warp_backward(grid: IpmGrid, grad_bev: np.ndarray) -> List[np.ndarray]:
    """warp 的伴随：BEV 梯度按转置双线性模板分配回各路源图像"""
    H, W = grid.config.shape
    grad_bev = np.asarray(grad_bev, dtype=np.float64)
    if grad_bev.shape[:2] != (H, W):
        raise ShapeMismatchError(f"BEV 梯度尺寸 {grad_bev.shape[:2]} 与网格 {(H, W)} 不符",
                                 error_code="BAD_GRAD_SHAPE")
    channels = grad_bev.shape[2:]
    flat = grid.warp_operator().T @ grad_bev.reshape(H * W, -1)
    out, offset = [], 0
    for cam in grid.cameras:
        n = cam.width * cam.height
        out.append(flat[offset:offset + n].reshape((cam.height, cam.width) + channels))
        offset += n
    return out


def backproject_weights(grid: IpmGrid, w_bev: np.ndarray) -> List[np.ndarray]:
    """
    把 BEV 权重图反投影到每路鱼眼图像。

    射线不与地面相交或交点不在 BEV 范围内的像素权重为 0。结果作为固定的调制掩码使用。
    """
    H, W = grid.config.shape
    w_bev = np.asarray(w_bev, dtype=np.float64)
    if w_bev.shape != (H, W):
        raise ShapeMismatchError(f"BEV 权重图尺寸 {w_bev.shape} 与网格 {(H, W)} 不符",
                                 error_code="BAD_WEIGHT_SHAPE")
    flat = w_bev.reshape(-1)
    return [(grid.backproject_operator(c) @ flat).reshape(cam.height, cam.width)
            for c, cam in enumerate(grid.cameras)]
