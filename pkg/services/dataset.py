"""
数据集读取

目录结构：
    calib.json                 四路相机标定 {"cameras": [...]}
    front/ rear/ left/ right/  每路相机的 PNG，文件名为零填充帧号（000000.png）
    trajectory.json            {"rate_hz": 10, "frames": [{"frame_id", "timestamp", "x", "y", "yaw"}]}
    slots.json                 {"slots": [世界系车位], "frames": {帧号: [BEV 像素标注]}}
    layout.json                （可选）合成布局，用于场景初始化
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from common.exceptions import DataFormatError, DatasetError
from common.utilities import read_image, read_json
from core.camera import FisheyeCamera, Pose, load_calibration
from perception.models import SlotAnnotation

logger = logging.getLogger(__name__)

CAMERA_NAMES = ('front', 'rear', 'left', 'right')
FRAME_NAME = "{:06d}.png"


def vehicle_pose(x: float, y: float, yaw: float) -> Pose:
    """车体在世界系中的平面位姿 (x, y, yaw) → 世界→车体 变换"""
    c, s = np.cos(yaw), np.sin(yaw)
    R_wv = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return Pose.from_matrix(R_wv.T, -R_wv.T @ np.array([x, y, 0.0]))


@dataclass
class DatasetFrame:
    """一帧：车体位姿、四路图像路径、该帧可见的车位标注（BEV 像素）"""
    frame_id: int
    timestamp: float
    x: float
    y: float
    yaw: float
    image_paths: Dict[str, str]
    annotations: List[SlotAnnotation] = field(default_factory=list)

    @property
    def key(self) -> str:
        return f"{self.frame_id:06d}"

    @property
    def pose(self) -> Pose:
        return vehicle_pose(self.x, self.y, self.yaw)

    def images(self, cameras: Sequence[FisheyeCamera]) -> List[np.ndarray]:
        """按相机顺序读取 (h, w, 3) float64 图像并校验尺寸"""
        out = []
        for cam in cameras:
            img = read_image(self.image_paths[cam.name])
            if img.shape[:2] != (cam.height, cam.width):
                raise DatasetError(f"{self.image_paths[cam.name]}: 尺寸 {img.shape[:2]} 与标定 "
                                   f"{(cam.height, cam.width)} 不符", error_code="IMAGE_SIZE_MISMATCH",
                                   details={"path": self.image_paths[cam.name]})
            out.append(img)
        return out


@dataclass
class Dataset:
    root: str
    cameras: List[FisheyeCamera]
    frames: List[DatasetFrame]
    world_slots: List[Dict] = field(default_factory=list)
    layout: Optional[Dict] = None
    holdout_every: int = 10

    def is_held_out(self, index: int) -> bool:
        return index % self.holdout_every == self.holdout_every - 1

    @property
    def train_frames(self) -> List[DatasetFrame]:
        return [f for i, f in enumerate(self.frames) if not self.is_held_out(i)]

    @property
    def eval_frames(self) -> List[DatasetFrame]:
        return [f for i, f in enumerate(self.frames) if self.is_held_out(i)]


def _require(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise DatasetError(f"缺少{what}: {path}", error_code="MISSING_FILE", details={"path": path})
    return path


def load_dataset(root: str, holdout_every: int = 10) -> Dataset:
    """
    读取并校验数据集目录。

    每第 holdout_every 帧（序号 9, 19, ...）留作评估。

    Raises:
        DatasetError: 缺少相机目录/图像文件、帧数不一致
        DataFormatError: JSON 格式错误
    """
    if not os.path.isdir(root):
        raise DatasetError(f"数据集目录不存在: {root}", error_code="NO_DATASET", details={"path": root})
    cameras = load_calibration(_require(os.path.join(root, 'calib.json'), "标定文件"))
    names = [c.name for c in cameras]
    for name in names:
        if not os.path.isdir(os.path.join(root, name)):
            raise DatasetError(f"缺少相机目录: {os.path.join(root, name)}", error_code="MISSING_CAMERA",
                               details={"camera": name})

    trajectory = read_json(_require(os.path.join(root, 'trajectory.json'), "轨迹文件"))
    slots = read_json(_require(os.path.join(root, 'slots.json'), "车位标注文件"))
    try:
        entries = trajectory['frames']
        per_frame = slots.get('frames', {})
    except (KeyError, TypeError, AttributeError) as e:
        raise DataFormatError(f"轨迹/标注文件结构错误: {e}", error_code="BAD_DATASET_JSON") from e

    frames, last_time = [], -np.inf
    for entry in entries:
        try:
            fid = int(entry['frame_id'])
            frame = DatasetFrame(frame_id=fid, timestamp=float(entry['timestamp']), x=float(entry['x']),
                                 y=float(entry['y']), yaw=float(entry['yaw']),
                                 image_paths={n: os.path.join(root, n, FRAME_NAME.format(fid)) for n in names},
                                 annotations=[SlotAnnotation.from_dict(a) for a in per_frame.get(str(fid), [])])
        except (KeyError, TypeError, ValueError) as e:
            raise DataFormatError(f"轨迹条目格式错误: {entry}: {e}", error_code="BAD_FRAME") from e
        if frame.timestamp <= last_time:
            raise DataFormatError(f"帧 {fid} 的时间戳不单调", error_code="BAD_TIMESTAMP")
        last_time = frame.timestamp
        for path in frame.image_paths.values():
            _require(path, "图像文件")
        frames.append(frame)

    for name in names:
        count = len([f for f in os.listdir(os.path.join(root, name)) if f.endswith('.png')])
        if count != len(frames):
            raise DatasetError(f"相机 {name} 有 {count} 张图像，轨迹有 {len(frames)} 帧",
                               error_code="COUNT_MISMATCH", details={"camera": name})

    layout_path = os.path.join(root, 'layout.json')
    layout = read_json(layout_path) if os.path.exists(layout_path) else None
    dataset = Dataset(root=root, cameras=cameras, frames=frames, world_slots=slots.get('slots', []),
                      layout=layout, holdout_every=holdout_every)
    logger.info(f"数据集加载完成: {root}, {len(frames)} 帧 "
                f"(训练 {len(dataset.train_frames)} / 评估 {len(dataset.eval_frames)})")
    return dataset
