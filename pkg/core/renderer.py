"""
渲染器

- 无迹变换 (UT) 投影：每个 3D 高斯取 2n+1 个 sigma 点，经 位姿变换 + 鱼眼投影 后重建 2D 均值与协方差，
  不需要对投影求线性化雅可比。
- 分块光栅化：splat 按到相机的距离全局排序，划入 16×16 的 tile，逐 tile 前向后 α 合成。
- 反向传播为手写伴随：合成 → conic → UT 矩 → 鱼眼雅可比 → 位姿 → 尺度/旋转/均值/SH/不透明度。
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from common.exceptions import CholeskyError, ConfigurationError, ShapeMismatchError
from core.camera import FisheyeCamera, Pose, quat_to_rotmat, quat_to_rotmat_backward
from core.scene import (GaussianPrimitive, GaussianScene, covariance_sqrt, sh_basis, sh_basis_gradient)

logger = logging.getLogger(__name__)

ALPHA_MAX = 1.0 - 1e-10


# ---------------------------------------------------------------------------
# 无迹变换
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UtParams:
    """UT 参数，λ = α²(n+κ) − n"""
    alpha: float = 1.0
    beta: float = 2.0
    kappa: float = 0.0

    def lam(self, n: int = 3) -> float:
        return self.alpha ** 2 * (n + self.kappa) - n

    def spread(self, n: int = 3) -> float:
        """sigma 点的展开系数 √(n+λ)"""
        total = n + self.lam(n)
        if total <= 0:
            raise ConfigurationError(f"UT 参数非法: n+λ = {total} ≤ 0", error_code="BAD_UT_PARAMS")
        return float(np.sqrt(total))

    def weights(self, n: int = 3) -> Tuple[np.ndarray, np.ndarray]:
        """返回 (均值权重, 协方差权重)，各 2n+1 个"""
        lam = self.lam(n)
        self.spread(n)
        wm = np.full(2 * n + 1, 1.0 / (2.0 * (n + lam)))
        wc = wm.copy()
        wm[0] = lam / (n + lam)
        wc[0] = wm[0] + (1.0 - self.alpha ** 2 + self.beta)
        return wm, wc


@dataclass(frozen=True)
class SigmaPointSet:
    points: np.ndarray         # (2n+1, n)
    mean_weights: np.ndarray   # (2n+1,)
    cov_weights: np.ndarray    # (2n+1,)

    def reconstruct(self) -> Tuple[np.ndarray, np.ndarray]:
        """由 sigma 点重建 (均值, 协方差)"""
        return weighted_moments(self.points, self.mean_weights, self.cov_weights)


def weighted_moments(values: np.ndarray, wm: np.ndarray, wc: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = wm @ values
    centered = values - mean
    return mean, (wc[:, None] * centered).T @ centered


def sigma_points(mu: np.ndarray, sigma: np.ndarray, params: UtParams = UtParams()) -> SigmaPointSet:
    """
    生成 sigma 点：x₀ = μ，x_i = μ ± √((n+λ)Σ) 的第 i 列。

    顺序为 [μ, μ+L₀, …, μ+L_{n-1}, μ−L₀, …, μ−L_{n-1}]。
    半正定但奇异的 Σ（如 Σ=0）改用特征分解求平方根。

    Raises:
        CholeskyError: Σ 存在负特征值
    """
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    n = mu.size
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.shape != (n, n):
        raise ShapeMismatchError(f"协方差形状 {sigma.shape} 与均值维度 {n} 不符", error_code="BAD_SHAPE")
    scaled = (n + params.lam(n)) * 0.5 * (sigma + sigma.T)
    try:
        L = np.linalg.cholesky(scaled)
    except np.linalg.LinAlgError:
        evals, evecs = np.linalg.eigh(scaled)
        tol = 1e-12 * max(1.0, float(np.max(np.abs(evals))))
        if evals.min() < -tol:
            raise CholeskyError(f"协方差非半正定 (最小特征值 {evals.min():.3e})", matrix=sigma,
                                error_code="NOT_PSD")
        L = evecs * np.sqrt(np.clip(evals, 0.0, None))
    points = np.concatenate([mu[None], mu + L.T, mu - L.T], axis=0)
    wm, wc = params.weights(n)
    return SigmaPointSet(points, wm, wc)


def ut_transform(mu: np.ndarray, sigma: np.ndarray, g: Callable[[np.ndarray], np.ndarray],
                 params: UtParams = UtParams()) -> Tuple[np.ndarray, np.ndarray]:
    """
    通用无迹变换：把 N(μ, Σ) 经向量化映射 g 推前，返回 (均值, 协方差)。

    :param g: 接收 (2n+1, n) 点集、返回 (2n+1, m) 的映射
    """
    sp = sigma_points(mu, sigma, params)
    projected = np.asarray(g(sp.points), dtype=np.float64)
    return weighted_moments(projected, sp.mean_weights, sp.cov_weights)


# ---------------------------------------------------------------------------
# 投影
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RenderConfig:
    tile_size: int = 16
    transmittance_min: float = 1e-4
    low_pass: float = 0.3
    near_clip: float = 0.05
    radius_sigmas: float = 3.0
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    ut: UtParams = field(default_factory=UtParams)
    threads: int = 1

    @classmethod
    def from_settings(cls, settings) -> 'RenderConfig':
        r = settings.renderer
        return cls(tile_size=r.tile_size, transmittance_min=r.transmittance_min, low_pass=r.low_pass,
                   near_clip=r.near_clip, radius_sigmas=r.radius_sigmas, background=tuple(r.background),
                   ut=UtParams(r.ut_alpha, r.ut_beta, r.ut_kappa), threads=settings.threads)


@dataclass(frozen=True)
class Splat2D:
    """投影到图像平面的单个高斯"""
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float
    index: int = -1


@dataclass
class ProjectedSplats:
    """
    按合成顺序（距离升序，同距离按图元序号）排列的可见 splat，以及反向传播所需的中间量。
    """
    index: np.ndarray        # (M,) 图元序号
    mean2d: np.ndarray       # (M, 2)
    cov2d: np.ndarray        # (M, 2, 2)，含低通
    conic: np.ndarray        # (M, 2, 2)
    depth: np.ndarray        # (M,) 相机系 z
    distance: np.ndarray     # (M,) 排序键
    color: np.ndarray        # (M, 3)
    color_raw: np.ndarray    # (M, 3) 截断前
    opacity: np.ndarray      # (M,)
    radius: np.ndarray       # (M,) 像素
    sigma_world: np.ndarray  # (M, 7, 3)
    sigma_cam: np.ndarray    # (M, 7, 3)
    centered2d: np.ndarray   # (M, 7, 2) sigma 点像素 − 均值
    rotation: np.ndarray     # (M, 3, 3)
    scales: np.ndarray       # (M, 3)
    quats: np.ndarray        # (M, 4)
    sh_coeffs: np.ndarray    # (M, B, 3)
    basis: np.ndarray        # (M, B)
    view_dir: np.ndarray     # (M, 3)
    view_norm: np.ndarray    # (M,)
    culled: int = 0

    @property
    def count(self) -> int:
        return len(self.index)

    def splat(self, k: int) -> Splat2D:
        return Splat2D(self.mean2d[k].copy(), self.cov2d[k].copy(), float(self.depth[k]),
                       self.color[k].copy(), float(self.opacity[k]), int(self.index[k]))


def _invert_2x2(cov: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    safe = np.where(det > 0, det, 1.0)
    conic = np.empty_like(cov)
    conic[:, 0, 0] = c / safe
    conic[:, 0, 1] = conic[:, 1, 0] = -b / safe
    conic[:, 1, 1] = a / safe
    return conic, det


def project_scene(scene: GaussianScene, camera: FisheyeCamera, config: RenderConfig = RenderConfig(),
                  pose: Optional[Pose] = None) -> ProjectedSplats:
    """
    对场景全部高斯做 UT 投影并剔除不可见者。

    剔除条件：任一 sigma 点超出鱼眼有效锥、中心距离小于近裁剪、2D 协方差退化、包围盒与图像不相交。
    """
    pose = pose or camera.pose
    Rc, tc = pose.R, pose.t
    c = config.ut.spread(3)
    wm, wc = config.ut.weights(3)

    M = covariance_sqrt(scene.quats, scene.log_scales)
    offsets = c * np.swapaxes(M, 1, 2)
    means = scene.means
    X = np.concatenate([means[:, None], means[:, None] + offsets, means[:, None] - offsets], axis=1)
    Y = X @ Rc.T + tc
    Z, in_fov = camera.project(Y)
    distance = np.linalg.norm(Y[:, 0], axis=1)
    valid = in_fov.all(axis=1) & (distance >= config.near_clip) & np.isfinite(Z).all(axis=(1, 2))
    idx = np.flatnonzero(valid)

    Z, X, Y = Z[idx], X[idx], Y[idx]
    mean2d = np.einsum('i,nij->nj', wm, Z)
    E = Z - mean2d[:, None]
    cov = np.einsum('i,nij,nik->njk', wc, E, E)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2)) + config.low_pass * np.eye(2)
    conic, det = _invert_2x2(cov)
    half_trace = 0.5 * (cov[:, 0, 0] + cov[:, 1, 1])
    lam_max = half_trace + np.sqrt(np.maximum(half_trace ** 2 - det, 0.0))
    radius = np.ceil(config.radius_sigmas * np.sqrt(lam_max))
    keep = ((det > 0) & (mean2d[:, 0] + radius >= 0) & (mean2d[:, 0] - radius <= camera.width - 1)
            & (mean2d[:, 1] + radius >= 0) & (mean2d[:, 1] - radius <= camera.height - 1))

    idx = idx[keep]
    order = np.lexsort((idx, distance[idx]))
    sel = np.flatnonzero(keep)[order]
    idx = idx[order]

    view = means[idx] - pose.center
    view_norm = np.linalg.norm(view, axis=1)
    view_dir = view / view_norm[:, None]
    basis = sh_basis(view_dir, scene.sh_degree)
    sh = scene.sh_coeffs[idx]
    raw = np.einsum('nb,nbc->nc', basis, sh) + 0.5

    culled = scene.count - len(idx)
    return ProjectedSplats(
        index=idx, mean2d=mean2d[sel], cov2d=cov[sel], conic=conic[sel],
        depth=Y[sel, 0, 2], distance=distance[idx], color=np.maximum(raw, 0.0), color_raw=raw,
        opacity=expit(scene.logit_opacities[idx]), radius=radius[sel],
        sigma_world=X[sel], sigma_cam=Y[sel], centered2d=E[sel],
        rotation=quat_to_rotmat(scene.quats[idx]), scales=np.exp(scene.log_scales[idx]),
        quats=scene.quats[idx], sh_coeffs=sh, basis=basis, view_dir=view_dir, view_norm=view_norm,
        culled=culled,
    )


def ut_project(primitive: GaussianPrimitive, camera: FisheyeCamera, params: UtParams = UtParams(),
               pose: Optional[Pose] = None, low_pass: float = 0.3) -> Optional[Splat2D]:
    """单个高斯的 UT 投影；被剔除时返回 None"""
    scene = GaussianScene(primitive.mu[None], primitive.quat[None], primitive.log_scales[None],
                          np.array([primitive.logit_opacity]), primitive.sh_coeffs[None],
                          sh_degree=int(round(np.sqrt(primitive.sh_coeffs.shape[0]))) - 1)
    config = RenderConfig(ut=params, low_pass=low_pass)
    projected = project_scene(scene, camera, config, pose)
    if projected.count == 0:
        logger.debug("高斯被剔除（sigma 点超出视场或在图像外）")
        return None
    return projected.splat(0)


# ---------------------------------------------------------------------------
# 光栅化
# ---------------------------------------------------------------------------

@dataclass
class SceneGradients:
    """损失对每个参数组的梯度；可选位姿梯度"""
    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    logit_opacities: np.ndarray
    sh_coeffs: np.ndarray
    pose_rotation: Optional[np.ndarray] = None
    pose_translation: Optional[np.ndarray] = None

    @classmethod
    def zeros_like(cls, scene: GaussianScene) -> 'SceneGradients':
        return cls(np.zeros_like(scene.means), np.zeros_like(scene.quats), np.zeros_like(scene.log_scales),
                   np.zeros_like(scene.logit_opacities), np.zeros_like(scene.sh_coeffs))

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {'means': self.means, 'quats': self.quats, 'log_scales': self.log_scales,
                'logit_opacities': self.logit_opacities, 'sh_coeffs': self.sh_coeffs}

    def add_(self, other: 'SceneGradients', scale: float = 1.0) -> 'SceneGradients':
        for name, arr in self.as_dict().items():
            arr += scale * getattr(other, name)
        return self

    def max_abs(self) -> float:
        return max(float(np.max(np.abs(arr))) if arr.size else 0.0 for arr in self.as_dict().values())


@dataclass
class RenderedView:
    rgb: np.ndarray           # (H, W, 3) float64，未截断上界
    alpha: np.ndarray         # (H, W) 累计不透明度
    camera: FisheyeCamera
    pose: Pose
    config: RenderConfig
    projected: ProjectedSplats
    tile_splats: List[np.ndarray]
    scene_count: int
    sh_degree: int
    gradients: Optional[SceneGradients] = None

    @property
    def shape(self) -> Tuple[int, int]:
        return self.rgb.shape[0], self.rgb.shape[1]

    def image(self) -> np.ndarray:
        """f32 [0,1] 图像，用于写文件"""
        return np.clip(self.rgb, 0.0, 1.0).astype(np.float32)


def _tile_grid(width: int, height: int, ts: int) -> Tuple[int, int]:
    return -(-width // ts), -(-height // ts)


def _bin_tiles(projected: ProjectedSplats, width: int, height: int, ts: int) -> List[np.ndarray]:
    """把 splat 划入所有与其 3σ 包围盒相交的 tile，tile 内保持合成顺序"""
    n_tx, n_ty = _tile_grid(width, height, ts)
    if projected.count == 0:
        return [np.empty(0, dtype=np.int64) for _ in range(n_tx * n_ty)]
    m, r = projected.mean2d, projected.radius
    x0 = np.clip(np.floor((m[:, 0] - r) / ts), 0, n_tx - 1).astype(np.int64)
    x1 = np.clip(np.floor((m[:, 0] + r) / ts), 0, n_tx - 1).astype(np.int64)
    y0 = np.clip(np.floor((m[:, 1] - r) / ts), 0, n_ty - 1).astype(np.int64)
    y1 = np.clip(np.floor((m[:, 1] + r) / ts), 0, n_ty - 1).astype(np.int64)
    nx, ny = x1 - x0 + 1, y1 - y0 + 1
    counts = nx * ny
    rank = np.repeat(np.arange(projected.count), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    nx_rep = np.repeat(nx, counts)
    tiles = (np.repeat(y0, counts) + local // nx_rep) * n_tx + np.repeat(x0, counts) + local % nx_rep
    order = np.lexsort((rank, tiles))
    tiles, rank = tiles[order], rank[order]
    bounds = np.searchsorted(tiles, np.arange(n_tx * n_ty + 1))
    return [rank[bounds[t]:bounds[t + 1]] for t in range(n_tx * n_ty)]


def _tile_pixels(tile: int, width: int, height: int, ts: int) -> Tuple[slice, slice, np.ndarray]:
    n_tx, _ = _tile_grid(width, height, ts)
    ty, tx = divmod(tile, n_tx)
    ys = slice(ty * ts, min((ty + 1) * ts, height))
    xs = slice(tx * ts, min((tx + 1) * ts, width))
    py, px = np.mgrid[ys, xs]
    return ys, xs, np.stack([px.ravel(), py.ravel()], axis=-1).astype(np.float64)


@dataclass
class _TileState:
    delta: np.ndarray        # (P, K, 2)
    gauss: np.ndarray        # (P, K)
    alpha: np.ndarray
    clipped: np.ndarray
    transmittance: np.ndarray
    weight: np.ndarray
    final: np.ndarray        # (P,)


def _composite(proj: ProjectedSplats, ids: np.ndarray, pixels: np.ndarray, t_min: float) -> _TileState:
    delta = pixels[:, None, :] - proj.mean2d[ids][None]
    conic = proj.conic[ids]
    dx, dy = delta[..., 0], delta[..., 1]
    power = -0.5 * (conic[:, 0, 0] * dx * dx + 2.0 * conic[:, 0, 1] * dx * dy + conic[:, 1, 1] * dy * dy)
    gauss = np.exp(power)
    raw = proj.opacity[ids] * gauss
    clipped = raw > ALPHA_MAX
    alpha = np.where(clipped, ALPHA_MAX, raw)
    one_minus = 1.0 - alpha
    T = np.ones_like(alpha)
    if alpha.shape[1] > 1:
        T[:, 1:] = np.cumprod(one_minus[:, :-1], axis=1)
    included = T >= t_min
    weight = np.where(included, alpha * T, 0.0)
    final = np.prod(np.where(included, one_minus, 1.0), axis=1)
    return _TileState(delta, gauss, alpha, clipped, np.where(included, T, 0.0), weight, final)


def _map_tiles(fn: Callable[[int], object], n_tiles: int, threads: int) -> List[object]:
    if threads <= 1:
        return [fn(t) for t in range(n_tiles)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n_tiles)))


def rasterize(scene: GaussianScene, camera: FisheyeCamera, config: RenderConfig = RenderConfig(),
              pose: Optional[Pose] = None) -> RenderedView:
    """
    渲染一路鱼眼视图。

    每个像素按 splat 顺序合成 C = Σ α_i T_i c_i + T_end·背景；
    T_i（该 splat 之前的透射率）低于 transmittance_min 时停止合成。
    """
    pose = pose or camera.pose
    W, H, ts = camera.width, camera.height, config.tile_size
    projected = project_scene(scene, camera, config, pose)
    tiles = _bin_tiles(projected, W, H, ts)
    bg = np.asarray(config.background, dtype=np.float64)

    def forward(tile: int):
        ys, xs, pixels = _tile_pixels(tile, W, H, ts)
        ids = tiles[tile]
        if ids.size == 0:
            return ys, xs, np.broadcast_to(bg, (len(pixels), 3)), np.zeros(len(pixels))
        st = _composite(projected, ids, pixels, config.transmittance_min)
        rgb = st.weight @ projected.color[ids] + st.final[:, None] * bg
        return ys, xs, rgb, 1.0 - st.final

    rgb = np.empty((H, W, 3))
    acc = np.empty((H, W))
    for ys, xs, block, block_alpha in _map_tiles(forward, len(tiles), config.threads):
        shape = (ys.stop - ys.start, xs.stop - xs.start)
        rgb[ys, xs] = np.asarray(block).reshape(shape + (3,))
        acc[ys, xs] = block_alpha.reshape(shape)
    logger.debug(f"{camera.name}: 可见 {projected.count} 个 splat，剔除 {projected.culled} 个")
    return RenderedView(rgb=rgb, alpha=acc, camera=camera, pose=pose, config=config, projected=projected,
                        tile_splats=tiles, scene_count=scene.count, sh_degree=scene.sh_degree)


def rasterize_backward(view: RenderedView, grad_image: np.ndarray, with_pose: bool = False) -> SceneGradients:
    """
    光栅化的反向传播。

    :param view: rasterize 的结果（保留了 tile 列表与投影中间量）
    :param grad_image: (H, W, 3) 损失对渲染图像的梯度
    :param with_pose: 是否同时返回相机位姿梯度
    :return: SceneGradients，同时写入 view.gradients
    """
    H, W = view.shape
    grad_image = np.asarray(grad_image, dtype=np.float64)
    if grad_image.shape != (H, W, 3):
        raise ShapeMismatchError(f"梯度图形状 {grad_image.shape} 与渲染图 {(H, W, 3)} 不符",
                                 error_code="BAD_GRAD_SHAPE")
    proj, config = view.projected, view.config
    ts = config.tile_size
    bg = np.asarray(config.background, dtype=np.float64)

    def backward(tile: int):
        ids = view.tile_splats[tile]
        if ids.size == 0:
            return None
        ys, xs, pixels = _tile_pixels(tile, W, H, ts)
        g = grad_image[ys, xs].reshape(-1, 3)
        if not np.any(g):
            return None
        st = _composite(proj, ids, pixels, config.transmittance_min)
        colors = proj.color[ids]
        g_color = st.weight.T @ g
        cdot = g @ colors.T
        wc = st.weight * cdot
        suffix = np.cumsum(wc[:, ::-1], axis=1)[:, ::-1] - wc
        suffix += (st.final * (g @ bg))[:, None]
        included = st.transmittance > 0
        g_alpha = np.where(included & ~st.clipped,
                           st.transmittance * cdot - suffix / (1.0 - st.alpha), 0.0)
        g_opacity = np.sum(g_alpha * st.gauss, axis=0)
        g_power = g_alpha * st.alpha
        dx, dy = st.delta[..., 0], st.delta[..., 1]
        conic = proj.conic[ids]
        g_conic = np.stack([np.sum(-0.5 * g_power * dx * dx, axis=0),
                            np.sum(-g_power * dx * dy, axis=0),
                            np.sum(-0.5 * g_power * dy * dy, axis=0)], axis=-1)
        g_mean = np.stack([np.sum(g_power * (conic[:, 0, 0] * dx + conic[:, 0, 1] * dy), axis=0),
                           np.sum(g_power * (conic[:, 0, 1] * dx + conic[:, 1, 1] * dy), axis=0)], axis=-1)
        return ids, g_color, g_opacity, g_conic, g_mean

    m = proj.count
    g_color = np.zeros((m, 3))
    g_opacity = np.zeros(m)
    g_conic = np.zeros((m, 3))
    g_mean = np.zeros((m, 2))
    for result in _map_tiles(backward, len(view.tile_splats), config.threads):
        if result is None:
            continue
        ids, gc, go, gq, gm = result
        np.add.at(g_color, ids, gc)
        np.add.at(g_opacity, ids, go)
        np.add.at(g_conic, ids, gq)
        np.add.at(g_mean, ids, gm)

    grads = _project_backward(view, g_mean, g_conic, g_opacity, g_color, with_pose)
    view.gradients = grads
    return grads


def _project_backward(view: RenderedView, g_mean: np.ndarray, g_conic: np.ndarray, g_opacity: np.ndarray,
                      g_color: np.ndarray, with_pose: bool) -> SceneGradients:
    """投影阶段的伴随：把 2D splat 梯度传回 3D 参数"""
    proj, config, camera, pose = view.projected, view.config, view.camera, view.pose
    n_basis = (view.sh_degree + 1) ** 2
    out = SceneGradients(np.zeros((view.scene_count, 3)), np.zeros((view.scene_count, 4)),
                         np.zeros((view.scene_count, 3)), np.zeros(view.scene_count),
                         np.zeros((view.scene_count, n_basis, 3)))
    if proj.count == 0:
        if with_pose:
            out.pose_rotation, out.pose_translation = np.zeros(4), np.zeros(3)
        return out

    wm, wc = config.ut.weights(3)
    c = config.ut.spread(3)

    # conic = cov⁻¹  →  dcov = −conic·G·conic
    G = np.empty((proj.count, 2, 2))
    G[:, 0, 0] = g_conic[:, 0]
    G[:, 0, 1] = G[:, 1, 0] = 0.5 * g_conic[:, 1]
    G[:, 1, 1] = g_conic[:, 2]
    g_cov = -proj.conic @ G @ proj.conic

    # UT 矩的伴随
    E = proj.centered2d
    spread_term = np.einsum('njk,nk->nj', g_cov, np.einsum('i,nik->nk', wc, E))
    g_Z = (wm[None, :, None] * g_mean[:, None, :]
           + 2.0 * wc[None, :, None] * np.einsum('njk,nik->nij', g_cov, E)
           - 2.0 * wm[None, :, None] * spread_term[:, None, :])

    J = camera.project_jacobian(proj.sigma_cam)
    g_Y = np.einsum('nija,nij->nia', J, g_Z)
    Rc = pose.R
    g_X = g_Y @ Rc

    g_mu = g_X.sum(axis=1)
    g_m = c * (g_X[:, 1:4] - g_X[:, 4:7])          # 行 k = dL/dm_k
    R, s = proj.rotation, proj.scales
    g_s = np.einsum('njk,nkj->nk', R, g_m)
    g_R = np.swapaxes(g_m, 1, 2) * s[:, None, :]
    g_q = quat_to_rotmat_backward(proj.quats, g_R)

    # SH 颜色（max(·,0) 截断处梯度为 0）
    g_raw = g_color * (proj.color_raw > 0)
    g_sh = proj.basis[:, :, None] * g_raw[:, None, :]
    dbasis = sh_basis_gradient(proj.view_dir, view.sh_degree)
    g_dir = np.einsum('nbk,nbc,nc->nk', dbasis, proj.sh_coeffs, g_raw)
    d = proj.view_dir
    g_view = (g_dir - d * np.sum(d * g_dir, axis=1, keepdims=True)) / proj.view_norm[:, None]
    g_mu = g_mu + g_view

    o = proj.opacity
    idx = proj.index
    out.means[idx] = g_mu
    out.quats[idx] = g_q
    out.log_scales[idx] = s * g_s
    out.logit_opacities[idx] = g_opacity * o * (1.0 - o)
    out.sh_coeffs[idx] = g_sh

    if with_pose:
        g_Rc = np.einsum('nia,nib->ab', g_Y, proj.sigma_world)
        g_tc = g_Y.sum(axis=(0, 1))
        # 颜色经由相机中心 center = −Rcᵀt 依赖位姿
        g_center = -g_view.sum(axis=0)
        g_Rc -= np.outer(pose.t, g_center)
        g_tc -= Rc @ g_center
        out.pose_rotation = quat_to_rotmat_backward(np.asarray(pose.rotation), g_Rc)
        out.pose_translation = g_tc
    return out


def render_views(scene: GaussianScene, cameras: Sequence[FisheyeCamera], config: RenderConfig = RenderConfig(),
                 rig_pose: Optional[Pose] = None) -> List[RenderedView]:
    """
    渲染全部环视相机。

    :param rig_pose: 世界→车体 位姿；相机位姿为 车体→相机，二者复合得到 世界→相机
    """
    views = []
    for cam in cameras:
        pose = cam.pose if rig_pose is None else cam.pose.compose(rig_pose)
        views.append(rasterize(scene, cam, config, pose))
    return views
