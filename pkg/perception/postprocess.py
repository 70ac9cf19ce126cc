"""
感知后处理

- corner_peaks：置信度场上的贪心非极大值抑制。
- edge_scores：沿角点连线的标线似然线积分，经 sigmoid 得到边得分（对图像可微）。
- annotations_to_teacher_field / annotations_to_teacher_edges：由人工标注构造理想教师输出。
- infer_slots：把角点与边组合为车位（入口点对 + 方向角），供精度/召回评估。
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage, sparse
from scipy.special import expit

from core.ipm import bilinear_stencil
from .models import Corner, CornerField, DetectedSlot, EdgeScores, SlotAnnotation, SlotType, cell_centers

logger = logging.getLogger(__name__)

TEACHER_SIGMA_CELLS = 2.0


def to_gray(image: np.ndarray) -> Tuple[np.ndarray, int]:
    """返回 (灰度图, 原通道数；单通道为 0)"""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        return image.mean(axis=2), image.shape[2]
    return image, 0


def gray_backward(grad_gray: np.ndarray, channels: int) -> np.ndarray:
    if channels == 0:
        return grad_gray
    return np.repeat(grad_gray[..., None] / channels, channels, axis=2)


def corner_peaks(field: CornerField, confidence_threshold: float = 0.25, nms_radius: float = 2.0) -> List[Corner]:
    """
    贪心 NMS：按置信度降序（同值按栅格序）依次保留，抑制半径 nms_radius（单元）内的其余候选。

    :return: 角点列表，位置 = 单元中心 + 偏移（BEV 像素）
    """
    conf = field.confidence
    flat = conf.reshape(-1)
    cand = np.flatnonzero(flat > confidence_threshold)
    if cand.size == 0:
        return []
    order = cand[np.argsort(-flat[cand], kind='stable')]
    ii, jj = np.divmod(order, conf.shape[1])
    suppressed = np.zeros(order.size, dtype=bool)
    positions = field.positions()
    r2 = nms_radius ** 2
    corners = []
    for n in range(order.size):
        if suppressed[n]:
            continue
        i, j = int(ii[n]), int(jj[n])
        suppressed |= (ii - i) ** 2 + (jj - j) ** 2 <= r2
        direction = field.direction[:, i, j]
        norm = np.linalg.norm(direction)
        direction = direction / norm if norm > 1e-12 else np.array([1.0, 0.0])
        corners.append(Corner(position=positions[i, j].copy(), direction=direction,
                              confidence=float(conf[i, j]), cell=(i, j)))
    return corners


@dataclass
class MarkingTrace:
    scale: float
    mask: np.ndarray
    channels: int


def marking_likelihood(image: np.ndarray, intensity_range: Optional[Tuple[float, float]] = None
                       ) -> Tuple[np.ndarray, MarkingTrace]:
    """
    标线似然：灰度按 5%/95% 分位数线性归一化并截断到 [0,1]。
    标线占比不足 5% 时分位数重合，退回到 (最小值, 最大值)。

    :param intensity_range: 固定的 (lo, hi)；为 None 时取图像分位数（视为常数，不参与求导）
    """
    gray, channels = to_gray(image)
    if intensity_range is not None:
        lo, hi = intensity_range
    else:
        lo, hi = np.percentile(gray, [5.0, 95.0])
        if hi - lo <= 1e-6:
            lo, hi = float(gray.min()), float(gray.max())
    scale = 1.0 / (hi - lo) if hi - lo > 1e-6 else 0.0
    raw = (gray - lo) * scale
    return np.clip(raw, 0.0, 1.0), MarkingTrace(scale, (raw > 0) & (raw < 1), channels)


@dataclass
class EdgeTrace:
    sampler: sparse.csr_matrix
    rows: np.ndarray
    cols: np.ndarray
    pair_scores: np.ndarray
    gain: float
    marking: MarkingTrace
    image_shape: Tuple[int, int]


def edge_scores(corners: Sequence[Corner], bev_image: np.ndarray, samples: int = 32, gain: float = 8.0,
                bias: float = 4.0, intensity_range: Optional[Tuple[float, float]] = None) -> EdgeScores:
    """
    边得分 score(i,j) = sigmoid(gain·mean(标线似然沿 p_i→p_j 的 samples 个双线性采样) − bias)。

    只计算上三角再镜像，保证矩阵严格对称。
    """
    corners = list(corners)
    k = len(corners)
    scores = np.zeros((k, k))
    if k < 2:
        return EdgeScores(corners, scores)
    m, mtrace = marking_likelihood(bev_image, intensity_range)
    H, W = m.shape
    rows, cols = np.triu_indices(k, 1)
    P = np.stack([c.position for c in corners])
    t = np.linspace(0.0, 1.0, samples)
    pts = (1.0 - t)[None, :, None] * P[rows][:, None] + t[None, :, None] * P[cols][:, None]
    pts = np.stack([np.clip(pts[..., 0], 0, W - 1), np.clip(pts[..., 1], 0, H - 1)], axis=-1)
    stencil_cols, stencil_w = bilinear_stencil(pts.reshape(-1, 2), W, H)
    sampler = sparse.csr_matrix(
        (stencil_w.reshape(-1) / samples, (np.repeat(np.arange(rows.size), samples * 4), stencil_cols.reshape(-1))),
        shape=(rows.size, H * W))
    pair = expit(gain * (sampler @ m.reshape(-1)) - bias)
    scores[rows, cols] = pair
    scores[cols, rows] = pair
    return EdgeScores(corners, scores, trace=EdgeTrace(sampler, rows, cols, pair, gain, mtrace, (H, W)))


def edge_scores_backward(edges: EdgeScores, grad_scores: np.ndarray) -> np.ndarray:
    """edge_scores 的伴随：得分矩阵梯度 → BEV 图像梯度"""
    tr: EdgeTrace = edges.trace
    if tr is None:
        return np.zeros(0)
    g_pair = grad_scores[tr.rows, tr.cols] + grad_scores[tr.cols, tr.rows]
    g_mean = g_pair * tr.gain * tr.pair_scores * (1.0 - tr.pair_scores)
    g_m = (tr.sampler.T @ g_mean).reshape(tr.image_shape)
    return gray_backward(g_m * tr.marking.scale * tr.marking.mask, tr.marking.channels)


def _cell_of(point: np.ndarray, stride: int) -> Tuple[int, int]:
    half = (stride - 1) / 2.0
    return int(round((point[1] - half) / stride)), int(round((point[0] - half) / stride))


def annotations_to_teacher_field(annotations: Sequence[SlotAnnotation], shape: Tuple[int, int],
                                 stride: int, sigma_cells: float = TEACHER_SIGMA_CELLS) -> CornerField:
    """
    由标注构造理想教师角点场：每个入口点一个 σ=2 单元的高斯包（按最大值合并），
    方向取车位方向，偏移为精确亚单元偏移。
    """
    h, w = shape
    field = CornerField.zeros(shape, stride, differentiable=False)
    centers = cell_centers(shape, stride)
    I, J = np.mgrid[0:h, 0:w]
    for ann in annotations:
        theta = np.radians(ann.angle_deg)
        direction = np.array([np.cos(theta), np.sin(theta)])
        for point in (np.asarray(ann.p1), np.asarray(ann.p2)):
            ci, cj = _cell_of(point, stride)
            if not (0 <= ci < h and 0 <= cj < w):
                logger.warning(f"标注点 {point.tolist()} 超出场范围，已忽略")
                continue
            bump = np.exp(-((I - ci) ** 2 + (J - cj) ** 2) / (2.0 * sigma_cells ** 2))
            better = bump > field.confidence
            field.confidence[better] = bump[better]
            field.direction[:, better] = direction[:, None]
            field.offset[:, better] = (point[None, :] - centers[better]).T
    return field


def annotations_to_teacher_edges(annotations: Sequence[SlotAnnotation], merge_px: float = 1.0) -> EdgeScores:
    """由标注构造教师边得分：入口点对得分 1，其余 0"""
    corners: List[Corner] = []

    def index_of(point: Tuple[float, float], direction: np.ndarray) -> int:
        p = np.asarray(point, dtype=np.float64)
        for n, c in enumerate(corners):
            if np.linalg.norm(c.position - p) <= merge_px:
                return n
        corners.append(Corner(position=p, direction=direction, confidence=1.0))
        return len(corners) - 1

    pairs = []
    for ann in annotations:
        theta = np.radians(ann.angle_deg)
        d = np.array([np.cos(theta), np.sin(theta)])
        pairs.append((index_of(ann.p1, d), index_of(ann.p2, d)))
    scores = np.zeros((len(corners), len(corners)))
    for a, b in pairs:
        scores[a, b] = scores[b, a] = 1.0
    return EdgeScores(corners, scores, differentiable=False)


def _probe(m: np.ndarray, start: np.ndarray, direction: np.ndarray, length: float, samples: int) -> float:
    t = np.linspace(0.0, length, samples)
    pts = start[None] + t[:, None] * direction[None]
    values = ndimage.map_coordinates(m, [pts[:, 1], pts[:, 0]], order=1, mode='constant', cval=0.0)
    return float(values.mean())


def infer_slots(edges: EdgeScores, bev_image: np.ndarray, px_per_m: float, min_score: float = 0.5,
                entrance_range_m: Tuple[float, float] = (1.5, 8.0), probe_m: float = 1.5,
                parallel_min_m: float = 4.0, samples: int = 16) -> List[DetectedSlot]:
    """
    把边得分高于 min_score 的角点对组合为车位。

    - 入口长度须在 entrance_range_m 内，连线中间不能经过第三个角点；
    - 车位朝向取两侧中分隔线标线似然较高的一侧；
    - 入口长于 parallel_min_m 视为平行车位。
    """
    corners = edges.corners
    k = len(corners)
    if k < 2:
        return []
    m, _ = marking_likelihood(bev_image)
    P = edges.positions()
    lo, hi = entrance_range_m[0] * px_per_m, entrance_range_m[1] * px_per_m
    slots = []
    for i, j in zip(*np.triu_indices(k, 1)):
        score = edges.scores[i, j]
        if score <= min_score:
            continue
        vec = P[j] - P[i]
        length = float(np.linalg.norm(vec))
        if not lo <= length <= hi:
            continue
        e = vec / length
        others = np.delete(np.arange(k), [i, j])
        if others.size:
            rel = P[others] - P[i]
            along = rel @ e
            across = np.abs(rel @ np.array([-e[1], e[0]]))
            if np.any((along > 0.05 * length) & (along < 0.95 * length) & (across < 3.0)):
                continue
        normal = np.array([-e[1], e[0]])
        probe = probe_m * px_per_m
        side_scores = [_probe(m, P[i], s * normal, probe, samples) + _probe(m, P[j], s * normal, probe, samples)
                       for s in (1.0, -1.0)]
        side = normal if side_scores[0] >= side_scores[1] else -normal
        p1, p2 = (P[i], P[j]) if np.dot(normal, side) > 0 else (P[j], P[i])
        angle = float(np.degrees(np.arctan2(side[1], side[0])) % 360.0)
        confidence = float(score * np.sqrt(corners[i].confidence * corners[j].confidence))
        slot_type = SlotType.PARALLEL if length / px_per_m >= parallel_min_m else SlotType.PERPENDICULAR
        slots.append(DetectedSlot(tuple(p1), tuple(p2), angle, confidence, slot_type))
    return slots
