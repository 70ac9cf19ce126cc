"""
外部热力图后端

读取外部检测器（如真实神经网络导出）预先计算的 PGHM 文件：
- 角点场：5 个平面 (置信度, 方向 x, 方向 y, 偏移 x, 偏移 y)，文件名 <key>_corners.pghm
- 边得分：1 个 K×(K+3) 平面 (得分矩阵 | u | v | 方向角)，文件名 <key>_edges.pghm
加载结果视为常量（无梯度通路），只能作为教师。
"""

import logging
import os
from typing import List, Optional, Tuple, Union

import numpy as np

from common.exceptions import DataFormatError, DatasetError, ShapeMismatchError
from common.utilities import read_pghm, write_pghm
from .base import SlotPerception
from .models import Corner, CornerField, EdgeScores

logger = logging.getLogger(__name__)


def load_external_field(path: str, stride: int = 4,
                        expected_shape: Optional[Tuple[int, int]] = None) -> Union[CornerField, EdgeScores]:
    """
    读取外部 PGHM 文件，按平面数区分角点场 (c=5) 与边得分 (c=1)。

    :param expected_shape: 角点场期望的 (h, w)，不符时报错
    :raises DataFormatError / ShapeMismatchError: 头部或形状错误（错误信息指明字段）
    """
    planes = read_pghm(path)
    c = planes.shape[0]
    if c == 5:
        field = CornerField.from_planes(planes, stride, differentiable=False)
        if expected_shape is not None and field.shape != tuple(expected_shape):
            raise ShapeMismatchError(f"外部角点场形状 {field.shape} 与配置 {tuple(expected_shape)} 不符",
                                     error_code="FIELD_SHAPE_MISMATCH",
                                     details={"field": "corner", "path": path})
        return field
    if c == 1:
        return EdgeScores.from_planes(planes, differentiable=False)
    raise DataFormatError(f"无法识别的外部热力图: {c} 个平面", error_code="BAD_FIELD",
                          details={"path": path, "planes": c})


def save_external_field(path: str, field: Union[CornerField, EdgeScores]) -> None:
    write_pghm(path, field.to_planes())


class ExternalPerception(SlotPerception):
    """外部热力图后端（不可微）"""

    def __init__(self, external_dir: str = '', stride: int = 4,
                 field_shape: Optional[Tuple[int, int]] = None, **kwargs):
        super().__init__(**kwargs)
        if not external_dir or not os.path.isdir(external_dir):
            raise DatasetError(f"外部热力图目录不存在: {external_dir!r}", error_code="NO_EXTERNAL_DIR")
        self.external_dir = external_dir
        self.stride = stride
        self.field_shape = field_shape

    def _get_backend_name(self) -> str:
        return 'external'

    @property
    def differentiable(self) -> bool:
        return False

    def _path(self, key: Optional[str], suffix: str) -> str:
        if key is None:
            raise DatasetError("外部后端需要帧标识来定位热力图文件", error_code="NO_FRAME_KEY")
        path = os.path.join(self.external_dir, f"{key}_{suffix}.pghm")
        if not os.path.exists(path):
            raise DatasetError(f"外部热力图缺失: {path}", error_code="MISSING_FIELD", details={"path": path})
        return path

    def detect_corners(self, bev_image: np.ndarray, key: Optional[str] = None) -> CornerField:
        field = load_external_field(self._path(key, 'corners'), self.stride, self.field_shape)
        if not isinstance(field, CornerField):
            raise DataFormatError("角点文件内容不是角点场", error_code="BAD_FIELD", details={"key": key})
        return field

    def score_edges(self, corners: List[Corner], bev_image: np.ndarray, key: Optional[str] = None) -> EdgeScores:
        edges = load_external_field(self._path(key, 'edges'), self.stride)
        if not isinstance(edges, EdgeScores):
            raise DataFormatError("边文件内容不是边得分", error_code="BAD_FIELD", details={"key": key})
        return edges
