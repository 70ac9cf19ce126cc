"""
训练目标与评估指标

训练目标（均带精确伴随）：
- l_rgb: (1−λ)·L1 + λ·D-SSIM
- l_align: 教师 Top-K 区域上的 softmax KL 对齐
- weighted_l1: 权重归一化的 L1（L_ipm 与 L_cam 共用）
- feature_l2: 置信度场均方差（feature-only 消融）
- total_loss: 按阶段组合

评估指标：psnr、ssim、slot_precision_recall、corner_precision_recall
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment
from scipy.special import softmax

from common.exceptions import ConfigurationError, ShapeMismatchError

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_CAP = 100.0
EPS = 1e-8


class Phase(Enum):
    """训练阶段"""
    PHOTOMETRIC = "photometric"
    SLOT_AWARE = "slot-aware"


@dataclass(frozen=True)
class LossWeights:
    lambda_dssim: float = 0.2
    lambda_align: float = 0.001
    lambda_ipm: float = 0.1
    lambda_cam: float = 0.1
    lambda_feature: float = 0.1
    topk_k: int = 512
    kl_direction: str = 'forward'

    def __post_init__(self):
        for name in ('lambda_dssim', 'lambda_align', 'lambda_ipm', 'lambda_cam', 'lambda_feature'):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} 不能为负", error_code="BAD_LOSS_WEIGHT")

    @classmethod
    def from_settings(cls, settings) -> 'LossWeights':
        s = settings.losses
        return cls(lambda_dssim=s.lambda_dssim, lambda_align=s.lambda_align, lambda_ipm=s.lambda_ipm,
                   lambda_cam=s.lambda_cam, lambda_feature=s.lambda_ipm, topk_k=s.topk_k,
                   kl_direction=s.kl_direction)


@dataclass(frozen=True)
class MatchCriteria:
    """车位/角点匹配标准：距离（BEV 像素）、角度（度）、置信度阈值"""
    distance: float = 10.0
    angle: float = 10.0
    confidence: float = 0.5
    strategy: str = 'greedy'   # greedy | optimal

    def __post_init__(self):
        if self.distance <= 0 or self.angle <= 0 or self.confidence <= 0:
            raise ConfigurationError("匹配标准必须为正", error_code="BAD_CRITERIA")
        if self.strategy not in ('optimal', 'greedy'):
            raise ConfigurationError(f"未知匹配策略: {self.strategy}", error_code="BAD_CRITERIA")

    @classmethod
    def from_settings(cls, settings) -> 'MatchCriteria':
        s = settings.evaluation
        return cls(distance=s.match_distance, angle=s.match_angle, confidence=s.match_confidence,
                   strategy=s.match_strategy)


def _check_shapes(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what}: 形状 {a.shape} 与 {b.shape} 不符", error_code="LOSS_SHAPE_MISMATCH")


# ==================== SSIM / PSNR ====================

@lru_cache(maxsize=4)
def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    y, x = np.ogrid[-half:half + 1, -half:half + 1]
    h = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    return h / h.sum()


def _filter(x: np.ndarray) -> np.ndarray:
    # 窗口对称，零填充的相关运算自伴
    return ndimage.correlate(x, gaussian_window(), mode='constant', cval=0.0)


@dataclass
class _SsimTerms:
    a: np.ndarray
    b: np.ndarray
    mu_a: np.ndarray
    mu_b: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    smap: np.ndarray


def _ssim_channel(a: np.ndarray, b: np.ndarray) -> _SsimTerms:
    mu_a, mu_b = _filter(a), _filter(b)
    s_aa = _filter(a * a) - mu_a * mu_a
    s_bb = _filter(b * b) - mu_b * mu_b
    s_ab = _filter(a * b) - mu_a * mu_b
    a1 = 2.0 * mu_a * mu_b + SSIM_C1
    a2 = 2.0 * s_ab + SSIM_C2
    b1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1
    b2 = s_aa + s_bb + SSIM_C2
    return _SsimTerms(a, b, mu_a, mu_b, a1, a2, b1, b2, (a1 * a2) / (b1 * b2))


def _ssim_channel_backward(t: _SsimTerms, g: np.ndarray) -> np.ndarray:
    """SSIM 图对第一幅图像的伴随"""
    denom = t.b1 * t.b2
    d_mu = (2.0 * t.mu_b * t.a2 - 2.0 * t.mu_b * t.a1) / denom \
        - t.smap * (2.0 * t.mu_a / t.b1 - 2.0 * t.mu_a / t.b2)
    d_eaa = -t.smap / t.b2
    d_eab = 2.0 * t.a1 / denom
    return _filter(g * d_mu) + 2.0 * t.a * _filter(g * d_eaa) + t.b * _filter(g * d_eab)


def _channels(img: np.ndarray) -> List[np.ndarray]:
    img = np.asarray(img, dtype=np.float64)
    return [img] if img.ndim == 2 else [img[..., c] for c in range(img.shape[2])]


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_shapes(np.asarray(a), np.asarray(b), "ssim")
    maps = [_ssim_channel(x, y).smap for x, y in zip(_channels(a), _channels(b))]
    return maps[0] if len(maps) == 1 else np.stack(maps, axis=-1)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """11×11 高斯窗（σ=1.5）SSIM 图的均值，多通道逐通道计算后整体平均"""
    return float(np.mean(ssim_map(a, b)))


def ssim_backward(a: np.ndarray, b: np.ndarray) -> Tuple[float, np.ndarray]:
    """返回 (SSIM, ∂SSIM/∂a)"""
    a = np.asarray(a, dtype=np.float64)
    _check_shapes(a, np.asarray(b), "ssim")
    n = a.size
    grads, values = [], []
    for x, y in zip(_channels(a), _channels(b)):
        t = _ssim_channel(x, y)
        values.append(t.smap.sum())
        grads.append(_ssim_channel_backward(t, np.full(x.shape, 1.0 / n)))
    grad = grads[0] if a.ndim == 2 else np.stack(grads, axis=-1)
    return float(np.sum(values) / n), grad


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR = 10·log10(1/MSE)，MSE < 1e-10 时封顶 100 dB"""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _check_shapes(a, b, "psnr")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP))


# ==================== 光度损失 ====================

def l_rgb(rendered: np.ndarray, target: np.ndarray, lambda_dssim: float = 0.2) -> Tuple[float, np.ndarray]:
    """
    光度损失 (1−λ)·mean|r − t| + λ·(1 − SSIM)/2

    Returns:
        (损失值, 对 rendered 的伴随)
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_shapes(rendered, target, "l_rgb")
    diff = rendered - target
    l1 = float(np.mean(np.abs(diff)))
    s, g_ssim = ssim_backward(rendered, target)
    value = (1.0 - lambda_dssim) * l1 + lambda_dssim * (1.0 - s) / 2.0
    grad = (1.0 - lambda_dssim) * np.sign(diff) / diff.size - 0.5 * lambda_dssim * g_ssim
    return value, grad


# ==================== 对齐损失 ====================

def topk_region(w_teacher: np.ndarray, k: int) -> np.ndarray:
    """教师权重最大的 K 个扁平索引；同值按索引顺序。K 超过像素数时取全部"""
    if k <= 0:
        raise ConfigurationError(f"Top-K 的 K 必须为正，当前为 {k}", error_code="BAD_TOPK")
    flat = np.asarray(w_teacher, dtype=np.float64).reshape(-1)
    return np.argsort(-flat, kind='stable')[:min(k, flat.size)]


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    return float(np.sum(p * (np.log(p + EPS) - np.log(q + EPS))))


def l_align(w_student: np.ndarray, w_teacher: np.ndarray, k: int = 512,
            direction: str = 'forward') -> Tuple[float, np.ndarray]:
    """
    Top-K 区域上的分布对齐。

    :param direction: forward = KL(π^s‖π^t)；reverse = KL(π^t‖π^s)；symmetric = 两者之和
    :return: (损失值, 对 w_student 的伴随)，教师侧无梯度
    """
    ws = np.asarray(w_student, dtype=np.float64)
    wt = np.asarray(w_teacher, dtype=np.float64)
    _check_shapes(ws, wt, "l_align")
    if direction not in ('forward', 'reverse', 'symmetric'):
        raise ConfigurationError(f"未知 KL 方向: {direction}", error_code="BAD_KL_DIRECTION")
    omega = topk_region(wt, k)
    ps = softmax(ws.reshape(-1)[omega])
    pt = softmax(wt.reshape(-1)[omega])

    value = 0.0
    g_ps = np.zeros_like(ps)
    if direction in ('forward', 'symmetric'):
        value += _kl(ps, pt)
        g_ps += np.log(ps + EPS) - np.log(pt + EPS) + ps / (ps + EPS)
    if direction in ('reverse', 'symmetric'):
        value += _kl(pt, ps)
        g_ps += -pt / (ps + EPS)

    grad = np.zeros(ws.size)
    grad[omega] = ps * (g_ps - np.dot(ps, g_ps))
    return value, grad.reshape(ws.shape)


# ==================== 加权 L1 ====================

@dataclass
class WeightedL1:
    value: float
    grad_pred: np.ndarray
    grad_weights: np.ndarray


def weighted_l1(pred: np.ndarray, target: np.ndarray, weights: np.ndarray) -> WeightedL1:
    """
    ‖W ⊙ |pred − target|‖₁ / max(‖W‖₁, ε)；多通道时先对通道取平均。

    对 W 的正缩放不变；W ≡ 0 时损失与伴随均为 0。
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    _check_shapes(pred, target, "weighted_l1")
    if weights.shape != pred.shape[:2]:
        raise ShapeMismatchError(f"weighted_l1: 权重 {weights.shape} 与图像 {pred.shape[:2]} 不符",
                                 error_code="LOSS_SHAPE_MISMATCH")
    diff = pred - target
    channels = diff.shape[2] if diff.ndim == 3 else 1
    m = np.abs(diff) if diff.ndim == 2 else np.abs(diff).mean(axis=2)
    total_w = float(weights.sum())
    denom = max(total_w, EPS)
    value = float(np.sum(weights * m) / denom)
    scale = weights / denom
    grad_pred = np.sign(diff) * (scale if diff.ndim == 2 else scale[..., None]) / channels
    grad_w = (m - value) / denom if total_w > EPS else m / denom
    return WeightedL1(value, grad_pred, grad_w)


def feature_l2(a: np.ndarray, b: np.ndarray) -> Tuple[float, np.ndarray]:
    """置信度场均方差；返回 (值, 对 a 的伴随)"""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _check_shapes(a, b, "feature_l2")
    diff = a - b
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


# ==================== 总损失 ====================

@dataclass
class LossBreakdown:
    """单步各损失分量与组合结果"""
    rgb: float = 0.0
    align: float = 0.0
    ipm: float = 0.0
    cam: float = 0.0
    feature: float = 0.0
    phase: Phase = Phase.PHOTOMETRIC
    total: float = 0.0

    def components(self) -> Dict[str, float]:
        return {'rgb': self.rgb, 'align': self.align, 'ipm': self.ipm, 'cam': self.cam, 'feature': self.feature}

    def recompose(self, weights: LossWeights) -> float:
        return total_loss(self.components(), weights, self.phase)

    def to_dict(self) -> Dict[str, Union[float, str]]:
        return {**self.components(), 'phase': self.phase.value, 'total': self.total}

    def non_finite(self) -> Optional[str]:
        for name, value in self.components().items():
            if not np.isfinite(value):
                return name
        return None


def total_loss(components: Dict[str, float], weights: LossWeights,
               phase: Union[Phase, str] = Phase.SLOT_AWARE) -> float:
    """
    光度阶段只取 L_rgb；车位感知阶段为
    L_rgb + λ_align·L_align + λ_ipm·L_ipm + λ_cam·L_cam (+ λ_feature·L_feature)
    """
    phase = Phase(phase)
    total = float(components.get('rgb', 0.0))
    if phase is Phase.PHOTOMETRIC:
        return total
    return (total + weights.lambda_align * components.get('align', 0.0)
            + weights.lambda_ipm * components.get('ipm', 0.0)
            + weights.lambda_cam * components.get('cam', 0.0)
            + weights.lambda_feature * components.get('feature', 0.0))


# ==================== 精度 / 召回 ====================

@dataclass
class MatchResult:
    true_positives: int
    false_positives: int
    false_negatives: int
    pairs: List[Tuple[int, int]] = field(default_factory=list)

    @property
    def precision(self) -> float:
        detections = self.true_positives + self.false_positives
        if detections == 0:
            return 1.0 if self.false_negatives == 0 else 0.0
        return self.true_positives / detections

    @property
    def recall(self) -> float:
        truths = self.true_positives + self.false_negatives
        return 1.0 if truths == 0 else self.true_positives / truths


def angle_close(theta_r: float, theta_i: float, tolerance: float) -> bool:
    """|θr − θi| < tol 或 360° − |θr − θi| < tol"""
    d = abs((theta_r % 360.0) - (theta_i % 360.0))
    return d < tolerance or 360.0 - d < tolerance


def _slot_feasible(det, gt, criteria: MatchCriteria) -> bool:
    d1, d2 = np.asarray(det.p1, dtype=float), np.asarray(det.p2, dtype=float)
    g1, g2 = np.asarray(gt.p1, dtype=float), np.asarray(gt.p2, dtype=float)
    r = criteria.distance
    direct = np.linalg.norm(d1 - g1) < r and np.linalg.norm(d2 - g2) < r
    swapped = np.linalg.norm(d1 - g2) < r and np.linalg.norm(d2 - g1) < r
    return bool((direct or swapped) and angle_close(det.angle_deg, gt.angle_deg, criteria.angle))


def _endpoint_distance(det, gt) -> float:
    """两入口点距离之和，点序取较小者"""
    d1, d2 = np.asarray(det.p1, dtype=float), np.asarray(det.p2, dtype=float)
    g1, g2 = np.asarray(gt.p1, dtype=float), np.asarray(gt.p2, dtype=float)
    return float(min(np.linalg.norm(d1 - g1) + np.linalg.norm(d2 - g2),
                     np.linalg.norm(d1 - g2) + np.linalg.norm(d2 - g1)))


def _slot_key(slot) -> Tuple[float, ...]:
    return (*map(float, slot.p1), *map(float, slot.p2), float(slot.angle_deg))


def _assign(feasible: np.ndarray, order: np.ndarray, strategy: str,
            cost: Optional[np.ndarray] = None, gt_rank: Optional[np.ndarray] = None) -> List[Tuple[int, int]]:
    """
    feasible: (检测数, 真值数) 布尔矩阵；返回一对一匹配。

    greedy 按 order 依次为检测选取代价最小的空闲真值，代价相同按 gt_rank。
    """
    if feasible.size == 0:
        return []
    if strategy == 'greedy':
        cost = np.zeros(feasible.shape) if cost is None else cost
        gt_rank = np.arange(feasible.shape[1]) if gt_rank is None else gt_rank
        used = np.zeros(feasible.shape[1], dtype=bool)
        pairs = []
        for i in order:
            free = np.flatnonzero(feasible[i] & ~used)
            if free.size:
                j = free[np.lexsort((gt_rank[free], cost[i, free]))[0]]
                used[j] = True
                pairs.append((int(i), int(j)))
        return pairs
    rows, cols = linear_sum_assignment(-feasible.astype(np.float64))
    return [(int(r), int(c)) for r, c in zip(rows, cols) if feasible[r, c]]


def _rank(keys: List[Tuple[float, ...]]) -> np.ndarray:
    """按键的字典序给出名次，与输入顺序无关"""
    rank = np.empty(len(keys), dtype=np.int64)
    rank[sorted(range(len(keys)), key=lambda k: keys[k])] = np.arange(len(keys))
    return rank


def match_slots(detections: Sequence, ground_truth: Sequence,
                criteria: MatchCriteria = MatchCriteria()) -> MatchResult:
    """
    一对一车位匹配。两个入口点都在 distance 内（点序不限）且方向满足角度条件即为可匹配；
    置信度低于阈值的检测不参与匹配，但仍计为误检。
    """
    dets, gts = list(detections), list(ground_truth)
    feasible = np.array([[d.confidence >= criteria.confidence and _slot_feasible(d, g, criteria) for g in gts]
                         for d in dets], dtype=bool).reshape(len(dets), len(gts))
    cost = np.array([[_endpoint_distance(d, g) for g in gts] for d in dets],
                    dtype=np.float64).reshape(len(dets), len(gts))
    order = np.array(sorted(range(len(dets)), key=lambda k: (-dets[k].confidence, _slot_key(dets[k]))),
                     dtype=np.int64)
    pairs = _assign(feasible, order, criteria.strategy, cost, _rank([_slot_key(g) for g in gts]))
    tp = len(pairs)
    return MatchResult(tp, len(dets) - tp, len(gts) - tp, pairs)


def slot_precision_recall(detections: Sequence, ground_truth: Sequence,
                          criteria: MatchCriteria = MatchCriteria()) -> Tuple[float, float]:
    result = match_slots(detections, ground_truth, criteria)
    return result.precision, result.recall


def corner_precision_recall(predicted: np.ndarray, ground_truth: np.ndarray, distance: float = 10.0,
                            confidences: Optional[np.ndarray] = None) -> Tuple[float, float]:
    """点级精度/召回：预测角点与真值角点距离小于 distance 即可匹配，一对一"""
    pred = np.asarray(predicted, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(ground_truth, dtype=np.float64).reshape(-1, 2)
    dist = np.linalg.norm(pred[:, None, :] - gt[None, :, :], axis=-1)
    feasible = (dist < distance).reshape(len(pred), len(gt))
    conf = np.ones(len(pred)) if confidences is None else np.asarray(confidences)
    pairs = _assign(feasible, np.argsort(-conf, kind='stable'), 'optimal')
    result = MatchResult(len(pairs), len(pred) - len(pairs), len(gt) - len(pairs), pairs)
    return result.precision, result.recall
