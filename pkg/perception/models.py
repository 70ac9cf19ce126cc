"""
车位感知数据模型

定义了感知阶段的标准化数据结构，所有感知后端（解析检测器、外部热力图）都返回这些结构。
BEV 像素坐标约定：u 向右、v 向下；方向角为 atan2(dv, du)，单位度，范围 [0, 360)。
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from common.exceptions import DataFormatError, ShapeMismatchError


class SlotType(Enum):
    """车位类型"""
    PERPENDICULAR = "perpendicular"
    PARALLEL = "parallel"


def cell_centers(shape: Tuple[int, int], stride: int) -> np.ndarray:
    """场单元中心的 BEV 像素坐标 (h, w, 2)：j·stride + (stride-1)/2"""
    h, w = shape
    i, j = np.mgrid[0:h, 0:w]
    half = (stride - 1) / 2.0
    return np.stack([j * stride + half, i * stride + half], axis=-1).astype(np.float64)


@dataclass
class CornerField:
    """角点场：置信度 (h, w)、方向 (2, h, w)、偏移 (2, h, w)，stride 为每个单元的 BEV 像素数"""
    confidence: np.ndarray
    direction: np.ndarray
    offset: np.ndarray
    stride: int = 4
    differentiable: bool = True
    trace: Optional[Any] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        self.offset = np.asarray(self.offset, dtype=np.float64)
        h, w = self.confidence.shape
        if self.direction.shape != (2, h, w) or self.offset.shape != (2, h, w):
            raise ShapeMismatchError(f"角点场各平面形状不一致: conf {self.confidence.shape}, "
                                     f"dir {self.direction.shape}, offset {self.offset.shape}",
                                     error_code="BAD_FIELD_SHAPE", details={"field": "corner"})

    @property
    def shape(self) -> Tuple[int, int]:
        return self.confidence.shape

    def positions(self) -> np.ndarray:
        """每个单元的亚像素角点位置 (h, w, 2)"""
        return cell_centers(self.shape, self.stride) + np.moveaxis(self.offset, 0, -1)

    def to_planes(self) -> np.ndarray:
        """(5, h, w)：置信度、方向 x/y、偏移 x/y"""
        return np.concatenate([self.confidence[None], self.direction, self.offset], axis=0)

    @classmethod
    def from_planes(cls, planes: np.ndarray, stride: int, differentiable: bool = False) -> 'CornerField':
        planes = np.asarray(planes, dtype=np.float64)
        if planes.ndim != 3 or planes.shape[0] != 5:
            raise ShapeMismatchError(f"角点场需要 5 个平面，实际形状 {planes.shape}",
                                     error_code="BAD_FIELD_SHAPE", details={"field": "corner"})
        return cls(planes[0], planes[1:3], planes[3:5], stride=stride, differentiable=differentiable)

    @classmethod
    def zeros(cls, shape: Tuple[int, int], stride: int, differentiable: bool = False) -> 'CornerField':
        h, w = shape
        return cls(np.zeros((h, w)), np.zeros((2, h, w)), np.zeros((2, h, w)), stride, differentiable)


@dataclass
class Corner:
    """单个角点检测"""
    position: np.ndarray      # BEV 像素 (u, v)
    direction: np.ndarray     # 单位向量
    confidence: float
    cell: Tuple[int, int] = (-1, -1)

    @property
    def angle_deg(self) -> float:
        return float(np.degrees(np.arctan2(self.direction[1], self.direction[0])) % 360.0)


@dataclass
class EdgeScores:
    """角点两两之间的边得分矩阵（对称、对角为 0）"""
    corners: List[Corner]
    scores: np.ndarray
    differentiable: bool = True
    trace: Optional[Any] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        k = len(self.corners)
        if self.scores.shape != (k, k):
            raise ShapeMismatchError(f"边得分矩阵形状 {self.scores.shape} 与角点数 {k} 不符",
                                     error_code="BAD_FIELD_SHAPE", details={"field": "edge"})

    @property
    def count(self) -> int:
        return len(self.corners)

    def positions(self) -> np.ndarray:
        if not self.corners:
            return np.zeros((0, 2))
        return np.stack([c.position for c in self.corners])

    def to_planes(self) -> np.ndarray:
        """(1, K, K+3)：得分矩阵 | u | v | 方向角(弧度)"""
        k = self.count
        table = np.zeros((k, k + 3))
        table[:, :k] = self.scores
        if k:
            table[:, k:k + 2] = self.positions()
            table[:, k + 2] = [np.arctan2(c.direction[1], c.direction[0]) for c in self.corners]
        return table[None]

    @classmethod
    def from_planes(cls, planes: np.ndarray, differentiable: bool = False) -> 'EdgeScores':
        planes = np.asarray(planes, dtype=np.float64)
        if planes.ndim != 3 or planes.shape[0] != 1 or planes.shape[2] != planes.shape[1] + 3:
            raise ShapeMismatchError(f"边得分文件形状应为 (1, K, K+3)，实际 {planes.shape}",
                                     error_code="BAD_FIELD_SHAPE", details={"field": "edge"})
        table = planes[0]
        k = table.shape[0]
        corners = [Corner(position=table[i, k:k + 2].copy(),
                          direction=np.array([np.cos(table[i, k + 2]), np.sin(table[i, k + 2])]),
                          confidence=1.0) for i in range(k)]
        return cls(corners, table[:, :k].copy(), differentiable=differentiable)


@dataclass
class SlotAnnotation:
    """车位入口点对 + 车位方向角 + 类型（BEV 像素坐标）"""
    p1: Tuple[float, float]
    p2: Tuple[float, float]
    angle_deg: float
    slot_type: SlotType = SlotType.PERPENDICULAR

    def __post_init__(self):
        self.p1 = tuple(float(v) for v in self.p1)
        self.p2 = tuple(float(v) for v in self.p2)
        self.angle_deg = float(self.angle_deg)
        if isinstance(self.slot_type, str):
            self.slot_type = SlotType(self.slot_type)
        if np.allclose(self.p1, self.p2):
            raise DataFormatError(f"车位入口点重合: {self.p1}", error_code="BAD_ANNOTATION")
        if not 0.0 <= self.angle_deg < 360.0:
            raise DataFormatError(f"车位方向角 {self.angle_deg} 不在 [0, 360) 内", error_code="BAD_ANNOTATION")

    def to_dict(self) -> Dict[str, Any]:
        return {'p1': list(self.p1), 'p2': list(self.p2), 'angle_deg': self.angle_deg,
                'type': self.slot_type.value}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SlotAnnotation':
        try:
            return cls(tuple(data['p1']), tuple(data['p2']), float(data['angle_deg']),
                       SlotType(data.get('type', 'perpendicular')))
        except (KeyError, ValueError, TypeError) as e:
            raise DataFormatError(f"车位标注格式错误: {data}: {e}", error_code="BAD_ANNOTATION") from e


@dataclass
class DetectedSlot:
    """推断出的车位（用于精度/召回评估）"""
    p1: Tuple[float, float]
    p2: Tuple[float, float]
    angle_deg: float
    confidence: float
    slot_type: SlotType = SlotType.PERPENDICULAR

    def to_dict(self) -> Dict[str, Any]:
        return {'p1': list(self.p1), 'p2': list(self.p2), 'angle_deg': self.angle_deg,
                'confidence': self.confidence, 'type': self.slot_type.value}
