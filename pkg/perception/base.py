"""
车位感知抽象基类

定义了所有感知后端必须实现的接口：角点场、边得分，以及（可微后端的）反向传播。
训练流程只依赖这个抽象，解析检测器与外部热力图可以无缝替换。
"""

import logging
from abc import ABC, abstractmethod
from typing import List, Optional, Tuple, Union

import numpy as np

from common.exceptions import ConfigurationError
from .models import Corner, CornerField, EdgeScores
from .postprocess import corner_peaks

logger = logging.getLogger(__name__)


class SlotPerception(ABC):
    """车位感知后端抽象基类"""

    def __init__(self, confidence_threshold: float = 0.25, nms_radius: float = 2.0, **kwargs):
        """
        Args:
            confidence_threshold: 角点峰值阈值
            nms_radius: 非极大值抑制半径（单元）
        """
        self.confidence_threshold = confidence_threshold
        self.nms_radius = nms_radius
        self.backend_name = self._get_backend_name()

    @abstractmethod
    def _get_backend_name(self) -> str:
        pass

    @property
    @abstractmethod
    def differentiable(self) -> bool:
        """输出是否携带对输入图像的梯度通路"""
        pass

    @abstractmethod
    def detect_corners(self, bev_image: np.ndarray, key: Optional[str] = None) -> CornerField:
        """
        在 BEV 图像上计算角点场

        Args:
            bev_image: (H, W) 或 (H, W, 3) BEV 图像
            key: 帧标识（外部后端据此定位文件）
        """
        pass

    @abstractmethod
    def score_edges(self, corners: List[Corner], bev_image: np.ndarray, key: Optional[str] = None) -> EdgeScores:
        """计算角点两两之间的边得分"""
        pass

    def corners_backward(self, field: CornerField, grad_confidence: np.ndarray) -> np.ndarray:
        """损失对置信度的梯度 → 对 BEV 图像的梯度"""
        raise ConfigurationError(f"感知后端 {self.backend_name} 不可微，不能作为学生使用",
                                 error_code="NOT_DIFFERENTIABLE")

    def edges_backward(self, edges: EdgeScores, grad_scores: np.ndarray) -> np.ndarray:
        """损失对边得分的梯度 → 对 BEV 图像的梯度"""
        raise ConfigurationError(f"感知后端 {self.backend_name} 不可微，不能作为学生使用",
                                 error_code="NOT_DIFFERENTIABLE")

    def perceive(self, bev_image: np.ndarray, key: Optional[str] = None) -> Tuple[CornerField, List[Corner], EdgeScores]:
        """
        完整感知流程（模板方法）：角点场 → 峰值 → 边得分

        Returns:
            (角点场, 角点列表, 边得分)
        """
        field = self.detect_corners(bev_image, key)
        corners = corner_peaks(field, self.confidence_threshold, self.nms_radius)
        edges = self.score_edges(corners, bev_image, key)
        logger.debug(f"{self.backend_name}: 检出 {len(corners)} 个角点")
        return field, corners, edges


def ensure_student(source: Union[SlotPerception, CornerField, EdgeScores]) -> None:
    """
    学生通路必须可微。

    Raises:
        ConfigurationError: 不可微的来源（外部热力图等）被用作学生
    """
    if not source.differentiable:
        name = getattr(source, 'backend_name', type(source).__name__)
        raise ConfigurationError(f"{name} 不可微，不能作为学生来源", error_code="NOT_DIFFERENTIABLE",
                                 details={"source": name})
