"""
车位感知监督权重

- shape_weights: W = sigmoid((H − τ)/T)^γ
- mix_corner / mix_edge: α·W^t + (1−α)·sg(W^s)，输出不向生产者回传梯度
- rasterize_edges: 选取得分最高的 K_e 条边，按高斯管 exp(−d²/2σ²) 栅格化（只在 4σ 带内计算）
- combine: W' = W_mix + λ_edge·W_edge
- upsample_and_backproject: 场分辨率 → IPM 分辨率（半像素对齐双线性）→ 各路相机
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from common.exceptions import NumericalError, ShapeMismatchError
from core.ipm import IpmGrid, backproject_weights

logger = logging.getLogger(__name__)


@dataclass
class WeightMap:
    """非负权重栅格；gradient_allowed 标记伴随是否允许流向其生产者"""
    values: np.ndarray
    gradient_allowed: bool = True

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape


@dataclass(frozen=True)
class SlotWeightConfig:
    tau: float = 0.25
    temperature: float = 0.5
    gamma: float = 1.0
    alpha: float = 0.8
    beta: float = 0.8
    top_k_edges: int = 8
    sigma_tube: float = 1.5
    tube_samples: int = 32
    min_edge_score: float = 0.5
    lambda_edge: float = 0.5
    edge_aggregation: str = 'max'
    stop_gradient: bool = True

    @classmethod
    def from_settings(cls, settings) -> 'SlotWeightConfig':
        s = settings.slotweights
        return cls(tau=s.tau, temperature=s.temperature, gamma=s.gamma, alpha=s.alpha, beta=s.beta,
                   top_k_edges=s.top_k_edges, sigma_tube=s.sigma_tube, tube_samples=s.tube_samples,
                   min_edge_score=s.min_edge_score, lambda_edge=s.lambda_edge,
                   edge_aggregation=s.edge_aggregation, stop_gradient=s.stop_gradient)


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what}: 形状 {a.shape} 与 {b.shape} 不符", error_code="WEIGHT_SHAPE_MISMATCH")


def shape_weights(h_conf: np.ndarray, tau: float = 0.25, temperature: float = 0.5, gamma: float = 1.0,
                  gradient_allowed: bool = True) -> WeightMap:
    """W = sigmoid((H_conf − τ)/T)^γ"""
    s = expit((np.asarray(h_conf, dtype=np.float64) - tau) / temperature)
    return WeightMap(s ** gamma, gradient_allowed)


def shape_weights_backward(h_conf: np.ndarray, grad_w: np.ndarray, tau: float = 0.25, temperature: float = 0.5,
                           gamma: float = 1.0) -> np.ndarray:
    s = expit((np.asarray(h_conf, dtype=np.float64) - tau) / temperature)
    return grad_w * gamma * s ** (gamma - 1.0) * s * (1.0 - s) / temperature


def _mix(w_teacher: WeightMap, w_student: WeightMap, coeff: float, what: str) -> WeightMap:
    _check_same_shape(w_teacher.values, w_student.values, what)
    return WeightMap(coeff * w_teacher.values + (1.0 - coeff) * w_student.values, gradient_allowed=False)


def mix_corner(w_teacher: WeightMap, w_student: WeightMap, alpha: float = 0.8) -> WeightMap:
    """W_mix = α·W^t + (1−α)·sg(W^s)"""
    return _mix(w_teacher, w_student, alpha, "mix_corner")


def mix_edge(w_teacher: WeightMap, w_student: WeightMap, beta: float = 0.8) -> WeightMap:
    """W_edge = β·W_edge^t + (1−β)·sg(W_edge^s)"""
    return _mix(w_teacher, w_student, beta, "mix_edge")


def mix_backward(grad_mix: np.ndarray, coeff: float, stop_gradient: bool = True) -> np.ndarray:
    """混合权重对学生权重的伴随；stop-gradient 下恒为 0（关闭仅用于测试）"""
    if stop_gradient:
        return np.zeros_like(grad_mix)
    return (1.0 - coeff) * grad_mix


def select_edges(edge_scores: np.ndarray, top_k: int, min_score: float) -> List[Tuple[int, int]]:
    """上三角中得分高于 min_score 的前 top_k 条边；同分按 (i, j) 字典序"""
    rows, cols = np.triu_indices(edge_scores.shape[0], 1)
    scores = edge_scores[rows, cols]
    keep = scores > min_score
    rows, cols, scores = rows[keep], cols[keep], scores[keep]
    order = np.lexsort((cols, rows, -scores))[:top_k]
    return [(int(rows[n]), int(cols[n])) for n in order]


def rasterize_edges(corners: np.ndarray, edge_scores: np.ndarray, shape: Tuple[int, int], top_k: int = 8,
                    sigma_tube: float = 1.5, samples: int = 32, min_score: float = 0.5,
                    aggregation: str = 'max') -> WeightMap:
    """
    高斯管栅格化。

    :param corners: (K, 2) 角点 BEV 像素位置
    :param edge_scores: (K, K) 对称得分矩阵
    :param shape: 输出 (H, W)
    :return: W_edge；e_ij(u,v) = max_t exp(−‖(u,v) − ℓ_ij(t)‖²/2σ²)，多条边按 max（或 sum）聚合
    """
    H, W = shape
    out = np.zeros((H, W))
    corners = np.asarray(corners, dtype=np.float64).reshape(-1, 2)
    if len(corners) < 2:
        return WeightMap(out, gradient_allowed=False)
    band = 4.0 * sigma_tube
    t = np.linspace(0.0, 1.0, samples)
    for i, j in select_edges(np.asarray(edge_scores), top_k, min_score):
        p, q = corners[i], corners[j]
        lo = np.floor(np.minimum(p, q) - band).astype(int)
        hi = np.ceil(np.maximum(p, q) + band).astype(int)
        u0, v0 = max(lo[0], 0), max(lo[1], 0)
        u1, v1 = min(hi[0], W - 1), min(hi[1], H - 1)
        if u0 > u1 or v0 > v1:
            continue
        vv, uu = np.mgrid[v0:v1 + 1, u0:u1 + 1]
        pix = np.stack([uu, vv], axis=-1).astype(np.float64)
        seg = q - p
        length2 = float(seg @ seg)
        along = np.clip(((pix - p) @ seg) / length2, 0.0, 1.0) if length2 > 0 else np.zeros(pix.shape[:2])
        near = np.linalg.norm(pix - (p + along[..., None] * seg), axis=-1) <= band
        pts = (1.0 - t)[:, None] * p + t[:, None] * q
        d2 = np.min(np.sum((pix[near][:, None, :] - pts[None]) ** 2, axis=-1), axis=1)
        tube = np.zeros(pix.shape[:2])
        tube[near] = np.exp(-d2 / (2.0 * sigma_tube ** 2))
        region = out[v0:v1 + 1, u0:u1 + 1]
        if aggregation == 'sum':
            region += tube
        else:
            np.maximum(region, tube, out=region)
    return WeightMap(out, gradient_allowed=False)


def combine(w_mix: WeightMap, w_edge: WeightMap, lambda_edge: float = 0.5) -> WeightMap:
    """W'_mix = W_mix + λ_edge·W_edge"""
    _check_same_shape(w_mix.values, w_edge.values, "combine")
    return WeightMap(w_mix.values + lambda_edge * w_edge.values,
                     gradient_allowed=w_mix.gradient_allowed and w_edge.gradient_allowed)


def _interp_matrix(n_out: int, n_in: int, stride: int) -> np.ndarray:
    """半像素对齐的一维双线性插值矩阵 (n_out, n_in)，边界截断"""
    x = np.clip((np.arange(n_out) + 0.5) / stride - 0.5, 0.0, n_in - 1)
    x0 = np.floor(x).astype(int)
    x1 = np.minimum(x0 + 1, n_in - 1)
    f = x - x0
    U = np.zeros((n_out, n_in))
    np.add.at(U, (np.arange(n_out), x0), 1.0 - f)
    np.add.at(U, (np.arange(n_out), x1), f)
    return U


def upsample(values: np.ndarray, stride: int, out_shape: Tuple[int, int]) -> np.ndarray:
    """场分辨率 → IPM 分辨率的双线性上采样"""
    h, w = values.shape
    return _interp_matrix(out_shape[0], h, stride) @ values @ _interp_matrix(out_shape[1], w, stride).T


def upsample_backward(grad: np.ndarray, stride: int, field_shape: Tuple[int, int]) -> np.ndarray:
    H, W = grad.shape
    return _interp_matrix(H, field_shape[0], stride).T @ grad @ _interp_matrix(W, field_shape[1], stride)


def upsample_and_backproject(w_field: WeightMap, grid: IpmGrid, stride: int) -> Tuple[WeightMap, List[np.ndarray]]:
    """上采样到 IPM 分辨率后反投影到每路相机"""
    w_ipm = WeightMap(upsample(w_field.values, stride, grid.config.shape), w_field.gradient_allowed)
    return w_ipm, backproject_weights(grid, w_ipm.values)


def check_weight_bounds(w: WeightMap, lambda_edge: float, aggregation: str = 'max') -> None:
    """W ∈ [0, 1 + λ_edge]（max 聚合时）；越界视为数值错误"""
    values = w.values
    if not np.all(np.isfinite(values)) or values.min() < -1e-12:
        raise NumericalError("权重图出现负值或非有限值", error_code="BAD_WEIGHTS")
    if aggregation == 'max' and values.max() > 1.0 + lambda_edge + 1e-9:
        raise NumericalError(f"权重图最大值 {values.max():.6f} 超出 1 + λ_edge", error_code="BAD_WEIGHTS")


@dataclass
class SlotWeights:
    """一帧的全部权重图"""
    teacher: WeightMap            # 场分辨率
    student: WeightMap            # 场分辨率（可微）
    corner_mix: WeightMap         # 场分辨率
    corner_mix_ipm: WeightMap     # IPM 分辨率
    edge_teacher: WeightMap
    edge_student: WeightMap
    edge_mix: WeightMap
    combined: WeightMap           # IPM 分辨率
    camera: List[np.ndarray] = field(default_factory=list)
    student_confidence: Optional[np.ndarray] = None


def build_slot_weights(teacher_conf: np.ndarray, student_conf: np.ndarray, teacher_corners: np.ndarray,
                       teacher_scores: np.ndarray, student_corners: np.ndarray, student_scores: np.ndarray,
                       grid: IpmGrid, stride: int, config: SlotWeightConfig = SlotWeightConfig()) -> SlotWeights:
    """
    由教师/学生输出构造完整权重：shape → mix → 上采样 → 边管 → combine → 反投影。
    """
    shape_ipm = grid.config.shape
    w_t = shape_weights(teacher_conf, config.tau, config.temperature, config.gamma, gradient_allowed=False)
    w_s = shape_weights(student_conf, config.tau, config.temperature, config.gamma, gradient_allowed=True)
    w_mix = mix_corner(w_t, w_s, config.alpha)
    w_mix_ipm = WeightMap(upsample(w_mix.values, stride, shape_ipm), gradient_allowed=False)
    tube = dict(shape=shape_ipm, top_k=config.top_k_edges, sigma_tube=config.sigma_tube,
                samples=config.tube_samples, min_score=config.min_edge_score, aggregation=config.edge_aggregation)
    e_t = rasterize_edges(teacher_corners, teacher_scores, **tube)
    e_s = rasterize_edges(student_corners, student_scores, **tube)
    e_mix = mix_edge(e_t, e_s, config.beta)
    combined = combine(w_mix_ipm, e_mix, config.lambda_edge)
    check_weight_bounds(combined, config.lambda_edge, config.edge_aggregation)
    return SlotWeights(w_t, w_s, w_mix, w_mix_ipm, e_t, e_s, e_mix, combined,
                       camera=backproject_weights(grid, combined.values),
                       student_confidence=np.asarray(student_conf, dtype=np.float64))


def slot_weights_backward(weights: SlotWeights, grad_combined: np.ndarray, grad_camera: Optional[Sequence[np.ndarray]],
                          grid: IpmGrid, stride: int,
                          config: SlotWeightConfig = SlotWeightConfig()) -> np.ndarray:
    """
    组合权重的梯度 → 学生置信度场的梯度。

    stop-gradient 开启时结果恒为 0；边管只依赖角点位置（argmax 产物），不回传。
    """
    g = np.asarray(grad_combined, dtype=np.float64).copy()
    if grad_camera is not None:
        for c, gc in enumerate(grad_camera):
            g += (grid.backproject_operator(c).T @ np.asarray(gc).reshape(-1)).reshape(g.shape)
    g_mix = upsample_backward(g, stride, weights.corner_mix.shape)
    g_student = mix_backward(g_mix, config.alpha, config.stop_gradient)
    return shape_weights_backward(weights.student_confidence, g_student, config.tau, config.temperature, config.gamma)
