"""
解析角点检测器

可微的车位角点检测器，作为冻结神经网络检测器的替身：
- 模板库：9×9 的 L 形与 T 形交叉模板，各 16 个方向（0..3 号解析绘制，其余由 rot90 精确得到）。
- 响应：归一化互相关 NCC = corr(I, t) / sqrt(局部能量 + floor²)，图像边界按边缘复制填充。
- 置信度：sigmoid(gain·smoothmax_τ(NCC) − bias)，smoothmax 为温度 τ 的 log-sum-exp 减去 log(K)/τ。
- 场：stride×stride 单元内取最大值，方向取获胜模板朝向，偏移由二次插值亚像素细化。
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage
from scipy.special import expit, logsumexp, softmax

from common.exceptions import ShapeMismatchError
from .base import SlotPerception
from .models import Corner, CornerField, EdgeScores, cell_centers
from .postprocess import edge_scores, edge_scores_backward, gray_backward, to_gray

logger = logging.getLogger(__name__)

ARM_SIGMA = 0.9
CONTRAST_FLOOR = 0.5


def _segment_distance(points: np.ndarray, direction: np.ndarray, length: float) -> np.ndarray:
    t = np.clip(points @ direction, 0.0, length)
    return np.linalg.norm(points - t[..., None] * direction, axis=-1)


def _draw_junction(size: int, angle: float, kind: str) -> np.ndarray:
    """绘制以中心为交点的 L/T 形标线模板（坐标 x 右、y 下）"""
    half = (size - 1) / 2.0
    y, x = np.mgrid[0:size, 0:size] - half
    pts = np.stack([x, y], axis=-1)
    arm = lambda a: np.array([np.cos(a), np.sin(a)])
    if kind == 'L':
        arms = [arm(angle), arm(angle + np.pi / 2)]
    else:
        arms = [arm(angle), arm(angle + np.pi / 2), arm(angle - np.pi / 2)]
    dist = np.min([_segment_distance(pts, a, half + 0.5) for a in arms], axis=0)
    return np.exp(-dist ** 2 / (2.0 * ARM_SIGMA ** 2))


@lru_cache(maxsize=8)
def template_bank(size: int = 9, orientations: int = 16) -> Tuple[np.ndarray, np.ndarray]:
    """
    返回 (模板 (K, size, size), 朝向角 (K,))，K = 2·orientations。

    每个模板零均值、单位范数。rot90 把朝向 φ 变为 φ − 90°，因此方向号 (k − r·orientations/4) 的模板
    由 k 号模板旋转 r 次得到。
    """
    quarter = orientations // 4
    templates, angles = [], []
    for kind in ('L', 'T'):
        bank = [None] * orientations
        for k in range(quarter):
            base = _draw_junction(size, 2 * np.pi * k / orientations, kind)
            for r in range(4):
                bank[(k - r * quarter) % orientations] = np.rot90(base, r)
        for k, tpl in enumerate(bank):
            tpl = tpl - tpl.mean()
            templates.append(tpl / np.linalg.norm(tpl))
            angles.append(2 * np.pi * k / orientations)
    return np.ascontiguousarray(templates), np.asarray(angles)


def _correlate_padded(padded: np.ndarray, kernel: np.ndarray, r: int) -> np.ndarray:
    """在边缘复制填充后的图像上做互相关，裁回原尺寸（窗口不会触及填充外的常数）"""
    return ndimage.correlate(padded, kernel, mode='constant', cval=0.0)[r:-r, r:-r]


def _convolve_padded(grad: np.ndarray, kernel: np.ndarray, r: int) -> np.ndarray:
    """_correlate_padded 的伴随：返回对填充图像的梯度"""
    return ndimage.convolve(np.pad(grad, r), kernel, mode='constant', cval=0.0)


def _pad_edge_backward(grad: np.ndarray, r: int) -> np.ndarray:
    """np.pad(mode='edge') 的伴随：填充区的梯度累加回边缘像素"""
    g = grad.copy()
    g[r] += g[:r].sum(axis=0)
    g[-r - 1] += g[-r:].sum(axis=0)
    g[:, r] += g[:, :r].sum(axis=1)
    g[:, -r - 1] += g[:, -r:].sum(axis=1)
    return g[r:-r, r:-r]


@dataclass
class DetectorTrace:
    """反向传播所需的中间量"""
    padded: np.ndarray        # (H+2r, W+2r) 边缘复制填充的灰度图
    channels: int
    corr: np.ndarray          # (K, H, W)
    sigma: np.ndarray         # (H, W)
    box_sum: np.ndarray       # (H, W)
    weights: np.ndarray       # (K, H, W) softmax 权重
    conf: np.ndarray          # (H, W) 像素级置信度
    argmax: np.ndarray        # (h, w) 单元内最大像素的扁平索引
    gain: float
    size: int


def analytic_corner_detector(bev_image: np.ndarray, stride: int = 4, size: int = 9, orientations: int = 16,
                             temperature: float = 10.0, gain: float = 8.0, bias: float = 4.0) -> CornerField:
    """
    在 BEV 图像上计算可微角点场。

    Raises:
        ShapeMismatchError: 图像小于模板
    """
    gray, channels = to_gray(bev_image)
    H, W = gray.shape
    if H < size or W < size:
        raise ShapeMismatchError(f"图像 {H}x{W} 小于模板 {size}x{size}", error_code="IMAGE_TOO_SMALL")
    templates, angles = template_bank(size, orientations)
    K = len(templates)

    r = size // 2
    padded = np.pad(gray, r, mode='edge')
    corr = np.stack([_correlate_padded(padded, t, r) for t in templates])
    ones = np.ones((size, size))
    s1 = _correlate_padded(padded, ones, r)
    s2 = _correlate_padded(padded * padded, ones, r)
    energy = np.maximum(s2 - s1 * s1 / ones.size, 0.0)
    sigma = np.sqrt(energy + CONTRAST_FLOOR ** 2)
    ncc = corr / sigma

    smax = logsumexp(temperature * ncc, axis=0) / temperature - np.log(K) / temperature
    weights = softmax(temperature * ncc, axis=0)
    conf = expit(gain * smax - bias)

    h, w = H // stride, W // stride
    blocks = conf[:h * stride, :w * stride].reshape(h, stride, w, stride).transpose(0, 2, 1, 3).reshape(h, w, -1)
    local = np.argmax(blocks, axis=2)
    li, lj = np.divmod(local, stride)
    pi = np.arange(h)[:, None] * stride + li
    pj = np.arange(w)[None, :] * stride + lj
    confidence = conf[pi, pj]

    winner = np.argmax(ncc[:, pi, pj], axis=0)
    direction = np.stack([np.cos(angles[winner]), np.sin(angles[winner])])

    def refine(center, minus, plus):
        denom = minus - 2.0 * center + plus
        delta = np.where(denom < -1e-12, 0.5 * (minus - plus) / np.where(denom < -1e-12, denom, -1.0), 0.0)
        return np.clip(delta, -0.5, 0.5)

    dx = refine(confidence, conf[pi, np.clip(pj - 1, 0, W - 1)], conf[pi, np.clip(pj + 1, 0, W - 1)])
    dy = refine(confidence, conf[np.clip(pi - 1, 0, H - 1), pj], conf[np.clip(pi + 1, 0, H - 1), pj])
    centers = cell_centers((h, w), stride)
    offset = np.stack([pj + dx - centers[..., 0], pi + dy - centers[..., 1]])

    trace = DetectorTrace(padded, channels, corr, sigma, s1, weights, conf, pi * W + pj, gain, size)
    return CornerField(confidence, direction, offset, stride=stride, differentiable=True, trace=trace)


def analytic_corner_backward(field: CornerField, grad_confidence: np.ndarray) -> np.ndarray:
    """
    角点场置信度梯度 → 图像梯度。

    方向与偏移来自 argmax，不可微。
    """
    tr: DetectorTrace = field.trace
    r = tr.size // 2
    H, W = tr.sigma.shape
    g_conf = np.zeros(H * W)
    np.add.at(g_conf, tr.argmax.reshape(-1), np.asarray(grad_confidence, dtype=np.float64).reshape(-1))
    g_conf = g_conf.reshape(H, W)

    g_smax = g_conf * tr.gain * tr.conf * (1.0 - tr.conf)
    g_ncc = tr.weights * g_smax[None]
    g_corr = g_ncc / tr.sigma[None]
    g_sigma = -np.sum(g_ncc * tr.corr, axis=0) / tr.sigma ** 2

    templates, _ = template_bank(tr.size, len(tr.corr) // 2)
    g_padded = np.zeros_like(tr.padded)
    for t, g in zip(templates, g_corr):
        g_padded += _convolve_padded(g, t, r)

    # sigma = sqrt(S2 − S1²/n + floor²)
    n = tr.size * tr.size
    ones = np.ones((tr.size, tr.size))
    energy = tr.sigma ** 2 - CONTRAST_FLOOR ** 2
    g_energy = np.where(energy > 0, g_sigma / (2.0 * tr.sigma), 0.0)
    g_padded += 2.0 * tr.padded * _convolve_padded(g_energy, ones, r)
    g_padded += _convolve_padded(-2.0 * tr.box_sum / n * g_energy, ones, r)
    return gray_backward(_pad_edge_backward(g_padded, r), tr.channels)


class AnalyticPerception(SlotPerception):
    """内置的可微解析检测器后端"""

    def __init__(self, stride: int = 4, template_size: int = 9, orientations: int = 16, temperature: float = 10.0,
                 gain: float = 8.0, bias: float = 4.0, edge_samples: int = 32, edge_gain: float = 8.0,
                 edge_bias: float = 4.0, **kwargs):
        super().__init__(**kwargs)
        self.stride = stride
        self.template_size = template_size
        self.orientations = orientations
        self.temperature = temperature
        self.gain = gain
        self.bias = bias
        self.edge_samples = edge_samples
        self.edge_gain = edge_gain
        self.edge_bias = edge_bias

    def _get_backend_name(self) -> str:
        return 'analytic'

    @property
    def differentiable(self) -> bool:
        return True

    def detect_corners(self, bev_image: np.ndarray, key: Optional[str] = None) -> CornerField:
        return analytic_corner_detector(bev_image, self.stride, self.template_size, self.orientations,
                                        self.temperature, self.gain, self.bias)

    def score_edges(self, corners: List[Corner], bev_image: np.ndarray, key: Optional[str] = None) -> EdgeScores:
        return edge_scores(corners, bev_image, self.edge_samples, self.edge_gain, self.edge_bias)

    def corners_backward(self, field: CornerField, grad_confidence: np.ndarray) -> np.ndarray:
        return analytic_corner_backward(field, grad_confidence)

    def edges_backward(self, edges: EdgeScores, grad_scores: np.ndarray) -> np.ndarray:
        return edge_scores_backward(edges, grad_scores)
