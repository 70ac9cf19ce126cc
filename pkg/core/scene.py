"""
高斯场景

- GaussianScene 以稠密数组保存全部图元参数（无约束重参数化：log 尺度、logit 不透明度）。
- 协方差 Σ = R·diag(exp(2·log_s))·Rᵀ；颜色由实球谐 (SH) 基按 3DGS 约定求值 (+0.5 偏移, 0 处截断)。
- 图元数量在训练中固定（不做增密/剪枝）。
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Protocol, Tuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit, logit

from common.exceptions import ConfigurationError, DatasetError
from core.camera import quat_to_rotmat

logger = logging.getLogger(__name__)

PARAM_GROUPS = ('means', 'quats', 'log_scales', 'logit_opacities', 'sh_coeffs')
MAX_SH_DEGREE = 3

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


def sh_basis_count(degree: int) -> int:
    return (degree + 1) ** 2


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """
    实球谐基函数值。

    :param dirs: (..., 3) 单位方向
    :param degree: 阶数 0..3
    :return: (..., (degree+1)²)
    """
    if not 0 <= degree <= MAX_SH_DEGREE:
        raise ConfigurationError(f"不支持的 SH 阶数: {degree}", error_code="BAD_SH_DEGREE")
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = np.empty(d.shape[:-1] + (sh_basis_count(degree),))
    out[..., 0] = SH_C0
    if degree >= 1:
        out[..., 1] = -SH_C1 * y
        out[..., 2] = SH_C1 * z
        out[..., 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 4] = SH_C2[0] * x * y
        out[..., 5] = SH_C2[1] * y * z
        out[..., 6] = SH_C2[2] * (2 * zz - xx - yy)
        out[..., 7] = SH_C2[3] * x * z
        out[..., 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        out[..., 9] = SH_C3[0] * y * (3 * xx - yy)
        out[..., 10] = SH_C3[1] * x * y * z
        out[..., 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        out[..., 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[..., 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        out[..., 14] = SH_C3[5] * z * (xx - yy)
        out[..., 15] = SH_C3[6] * x * (xx - 3 * yy)
    return out


def sh_basis_gradient(dirs: np.ndarray, degree: int) -> np.ndarray:
    """
    基函数对方向分量 (x, y, z) 的偏导，形状 (..., (degree+1)², 3)。
    """
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    zero = np.zeros_like(x)
    g = np.zeros(d.shape[:-1] + (sh_basis_count(degree), 3))
    if degree >= 1:
        g[..., 1, 1] = -SH_C1
        g[..., 2, 2] = SH_C1
        g[..., 3, 0] = -SH_C1
    if degree >= 2:
        g[..., 4, :] = SH_C2[0] * np.stack([y, x, zero], -1)
        g[..., 5, :] = SH_C2[1] * np.stack([zero, z, y], -1)
        g[..., 6, :] = SH_C2[2] * np.stack([-2 * x, -2 * y, 4 * z], -1)
        g[..., 7, :] = SH_C2[3] * np.stack([z, zero, x], -1)
        g[..., 8, :] = SH_C2[4] * np.stack([2 * x, -2 * y, zero], -1)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        g[..., 9, :] = SH_C3[0] * np.stack([6 * x * y, 3 * xx - 3 * yy, zero], -1)
        g[..., 10, :] = SH_C3[1] * np.stack([y * z, x * z, x * y], -1)
        g[..., 11, :] = SH_C3[2] * np.stack([-2 * x * y, 4 * zz - xx - 3 * yy, 8 * y * z], -1)
        g[..., 12, :] = SH_C3[3] * np.stack([-6 * x * z, -6 * y * z, 6 * zz - 3 * xx - 3 * yy], -1)
        g[..., 13, :] = SH_C3[4] * np.stack([4 * zz - 3 * xx - yy, -2 * x * y, 8 * x * z], -1)
        g[..., 14, :] = SH_C3[5] * np.stack([2 * x * z, -2 * y * z, xx - yy], -1)
        g[..., 15, :] = SH_C3[6] * np.stack([3 * xx - 3 * yy, -6 * x * y, zero], -1)
    return g


def eval_color(sh_coeffs: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    """
    在给定视线方向上求 SH 颜色。

    :param sh_coeffs: (..., B, 3) 系数，B = (L+1)²
    :param view_dir: (..., 3) 单位视线方向
    :return: (..., 3) rgb = max(Σ c·Y + 0.5, 0)
    """
    coeffs = np.asarray(sh_coeffs, dtype=np.float64)
    degree = int(round(np.sqrt(coeffs.shape[-2]))) - 1
    basis = sh_basis(view_dir, degree)
    return np.maximum(np.einsum('...b,...bc->...c', basis, coeffs) + 0.5, 0.0)


def covariance_sqrt(quats: np.ndarray, log_scales: np.ndarray) -> np.ndarray:
    """M = R·diag(s)，满足 Σ = M·Mᵀ"""
    R = quat_to_rotmat(quats)
    return R * np.exp(np.asarray(log_scales, dtype=np.float64))[..., None, :]


def covariance(quat: np.ndarray, log_scales: np.ndarray) -> np.ndarray:
    """
    Σ = R·diag(exp(2·log_scales))·Rᵀ，四元数在内部归一化，输出严格对称。
    """
    M = covariance_sqrt(quat, log_scales)
    sigma = M @ np.swapaxes(M, -1, -2)
    return 0.5 * (sigma + np.swapaxes(sigma, -1, -2))


@dataclass(frozen=True)
class GaussianPrimitive:
    """单个高斯图元的只读快照"""
    mu: np.ndarray
    quat: np.ndarray
    log_scales: np.ndarray
    logit_opacity: float
    sh_coeffs: np.ndarray

    @property
    def opacity(self) -> float:
        return float(expit(self.logit_opacity))

    @property
    def covariance(self) -> np.ndarray:
        return covariance(self.quat, self.log_scales)


@dataclass
class GaussianScene:
    """稠密数组形式的高斯场景"""
    means: np.ndarray            # (N, 3)
    quats: np.ndarray            # (N, 4) [w, x, y, z]
    log_scales: np.ndarray       # (N, 3)
    logit_opacities: np.ndarray  # (N,)
    sh_coeffs: np.ndarray        # (N, B, 3)
    sh_degree: int = 2
    iteration: int = 0

    def __post_init__(self):
        n = len(self.means)
        if n == 0:
            raise DatasetError("高斯场景不能为空", error_code="EMPTY_SCENE")
        expected = {
            'means': (n, 3), 'quats': (n, 4), 'log_scales': (n, 3), 'logit_opacities': (n,),
            'sh_coeffs': (n, sh_basis_count(self.sh_degree), 3),
        }
        for name, shape in expected.items():
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise DatasetError(f"场景字段 {name} 形状 {arr.shape} != {shape}", error_code="BAD_SCENE")
            setattr(self, name, arr)

    @property
    def count(self) -> int:
        return len(self.means)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return expit(self.logit_opacities)

    def parameters(self) -> Dict[str, np.ndarray]:
        """按参数组返回可原地更新的数组"""
        return {name: getattr(self, name) for name in PARAM_GROUPS}

    def primitive(self, index: int) -> GaussianPrimitive:
        return GaussianPrimitive(self.means[index].copy(), self.quats[index].copy(),
                                 self.log_scales[index].copy(), float(self.logit_opacities[index]),
                                 self.sh_coeffs[index].copy())

    def copy(self) -> 'GaussianScene':
        return GaussianScene(self.means.copy(), self.quats.copy(), self.log_scales.copy(),
                             self.logit_opacities.copy(), self.sh_coeffs.copy(),
                             self.sh_degree, self.iteration)

    def subset(self, index: np.ndarray) -> 'GaussianScene':
        return GaussianScene(self.means[index], self.quats[index], self.log_scales[index],
                             self.logit_opacities[index], self.sh_coeffs[index],
                             self.sh_degree, self.iteration)

    def renormalize_quaternions(self) -> None:
        """每步优化后把四元数投影回单位球面；范数退化的重置为单位四元数"""
        norm = np.linalg.norm(self.quats, axis=1, keepdims=True)
        degenerate = (norm[:, 0] < 1e-12) | ~np.isfinite(norm[:, 0])
        if degenerate.any():
            logger.warning(f"{int(degenerate.sum())} 个四元数范数退化，已重置为单位四元数")
            self.quats[degenerate] = (1.0, 0.0, 0.0, 0.0)
            norm[degenerate] = 1.0
        self.quats /= norm

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(arr)) for arr in self.parameters().values())


class PointSourceLike(Protocol):
    def sample_points(self, count: int, rng: np.random.Generator) -> 'PointSource':
        ...


@dataclass
class PointSource:
    """初始化用的点集，可带颜色"""
    points: np.ndarray
    colors: Optional[np.ndarray] = None

    def sample_points(self, count: int, rng: np.random.Generator) -> 'PointSource':
        if len(self.points) <= count:
            return self
        idx = np.sort(rng.choice(len(self.points), size=count, replace=False))
        colors = None if self.colors is None else self.colors[idx]
        return PointSource(self.points[idx], colors)


@dataclass
class RandomBoxSource:
    """在包围盒内均匀随机采样的点源"""
    low: Tuple[float, float, float] = (-1.0, -1.0, -1.0)
    high: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def sample_points(self, count: int, rng: np.random.Generator) -> PointSource:
        pts = rng.uniform(self.low, self.high, size=(count, 3))
        return PointSource(pts, None)


def nearest_neighbor_scale(points: np.ndarray, k: int = 3) -> np.ndarray:
    """每个点到最近 k 个邻居的平均距离（单点时返回 1）"""
    n = len(points)
    if n < 2:
        return np.ones(n)
    kk = min(k, n - 1)
    dist, _ = cKDTree(points).query(points, k=kk + 1)
    mean = np.mean(np.asarray(dist).reshape(n, -1)[:, 1:], axis=1)
    return np.maximum(mean, 1e-7)


def init_scene(source: Optional[PointSourceLike], count: int, sh_degree: int = 2,
               seed: int = 0, init_opacity: float = 0.1, knn: int = 3) -> GaussianScene:
    """
    初始化高斯场景。

    :param source: 点集 / 合成布局（实现 sample_points）/ None 表示在单位立方体内随机
    :param count: 图元数量上限
    :param sh_degree: SH 阶数
    :param seed: 随机种子，相同种子逐位可复现
    :param init_opacity: 初始不透明度
    :param knn: 尺度初始化所用的近邻数
    :return: GaussianScene
    """
    if count < 1:
        raise ConfigurationError(f"图元数量必须 ≥ 1: {count}", error_code="BAD_COUNT")
    rng = np.random.default_rng(seed)
    if source is None:
        source = RandomBoxSource()
    sampled = source.sample_points(count, rng)
    points = np.asarray(sampled.points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise DatasetError("初始化点源为空", error_code="EMPTY_SOURCE")
    n = len(points)
    colors = np.full((n, 3), 0.5) if sampled.colors is None else np.asarray(sampled.colors, dtype=np.float64)
    sh = np.zeros((n, sh_basis_count(sh_degree), 3))
    sh[:, 0, :] = (colors - 0.5) / SH_C0
    scale = nearest_neighbor_scale(points, knn)
    scene = GaussianScene(
        means=points.copy(),
        quats=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        log_scales=np.repeat(np.log(scale)[:, None], 3, axis=1),
        logit_opacities=np.full(n, float(logit(init_opacity))),
        sh_coeffs=sh,
        sh_degree=sh_degree,
    )
    logger.info(f"场景初始化完成: {n} 个高斯, SH 阶数 {sh_degree}, 平均尺度 {scale.mean():.4f} m")
    return scene
