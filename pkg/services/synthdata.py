"""
合成停车场数据生成

用解析光线投射（纹理地面 + 长方体墙柱）按精确鱼眼模型渲染四路 GT 图像，
与高斯光栅化器相互独立。输出目录结构见 services.dataset。

标线：每排一条入口线，每个车位边界一条分隔线；排内为 T 形交叉，排端为 L 形交叉。
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from common.exceptions import ConfigurationError
from common.utilities import write_image, write_json
from core.camera import FisheyeCamera, default_rig, save_calibration
from core.ipm import IpmConfig
from core.scene import PointSource
from perception.models import SlotAnnotation, SlotType
from .dataset import FRAME_NAME, vehicle_pose

logger = logging.getLogger(__name__)

GROUND_ALBEDO = (0.34, 0.34, 0.36)
MARKING_ALBEDO = (0.92, 0.92, 0.88)
SKY_RADIANCE = (0.55, 0.6, 0.65)
TEXTURE_CELL_M = 0.5
TEXTURE_AMPLITUDE = 0.06
LIGHT_DIR = np.array([0.3, 0.5, 0.81]) / np.linalg.norm([0.3, 0.5, 0.81])


@dataclass
class SlotRow:
    """一排车位：入口线起点、沿排方向与车位纵深方向（世界系平面单位向量）"""
    origin: Tuple[float, float]
    along: Tuple[float, float]
    depth_dir: Tuple[float, float]
    count: int = 6
    slot_width: float = 2.6
    slot_depth: float = 5.2
    line_width: float = 0.15
    kind: str = 'perpendicular'

    def entrance_points(self) -> np.ndarray:
        """(count+1, 2) 入口线上的车位边界点"""
        k = np.arange(self.count + 1)[:, None]
        return np.asarray(self.origin) + k * self.slot_width * np.asarray(self.along)

    def segments(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        """标线中心线段：入口线 + 每个边界点的分隔线"""
        pts = self.entrance_points()
        segs = [(pts[0], pts[-1])]
        segs += [(p, p + self.slot_depth * np.asarray(self.depth_dir)) for p in pts]
        return segs

    def footprint(self) -> np.ndarray:
        """(4, 2) 排占地矩形（含半个线宽）"""
        a, d = np.asarray(self.along), np.asarray(self.depth_dir)
        hw = self.line_width / 2.0
        p0 = np.asarray(self.origin) - hw * a - hw * d
        length = self.count * self.slot_width + self.line_width
        depth = self.slot_depth + self.line_width
        return np.array([p0, p0 + length * a, p0 + length * a + depth * d, p0 + depth * d])


@dataclass
class Box:
    """轴对齐长方体（墙、柱）"""
    center: Tuple[float, float, float]
    size: Tuple[float, float, float]
    albedo: Tuple[float, float, float] = (0.55, 0.55, 0.52)

    @property
    def low(self) -> np.ndarray:
        return np.asarray(self.center) - np.asarray(self.size) / 2.0

    @property
    def high(self) -> np.ndarray:
        return np.asarray(self.center) + np.asarray(self.size) / 2.0


@dataclass
class ParkingLayout:
    """停车场布局（米）"""
    extent: Tuple[float, float, float, float] = (-14.0, 18.0, -11.0, 11.0)   # xmin, xmax, ymin, ymax
    rows: List[SlotRow] = field(default_factory=list)
    boxes: List[Box] = field(default_factory=list)
    texture_seed: int = 0
    lighting: float = 1.0

    def __post_init__(self):
        self.rows = [r if isinstance(r, SlotRow) else SlotRow(**r) for r in self.rows]
        self.boxes = [b if isinstance(b, Box) else Box(**b) for b in self.boxes]
        self._texture: Optional[np.ndarray] = None

    def to_dict(self) -> Dict[str, Any]:
        return {'extent': list(self.extent), 'rows': [asdict(r) for r in self.rows],
                'boxes': [asdict(b) for b in self.boxes], 'texture_seed': self.texture_seed,
                'lighting': self.lighting}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ParkingLayout':
        return cls(extent=tuple(data['extent']), rows=[SlotRow(**r) for r in data['rows']],
                   boxes=[Box(**b) for b in data.get('boxes', [])], texture_seed=int(data.get('texture_seed', 0)),
                   lighting=float(data.get('lighting', 1.0)))

    def validate(self) -> 'ParkingLayout':
        """
        Raises:
            ConfigurationError: 车位排互相重叠或超出场地（错误详情列出全部问题）
        """
        problems = []
        xmin, xmax, ymin, ymax = self.extent
        for i, row in enumerate(self.rows):
            fp = row.footprint()
            if np.any(fp[:, 0] < xmin) or np.any(fp[:, 0] > xmax) or np.any(fp[:, 1] < ymin) or np.any(fp[:, 1] > ymax):
                problems.append(f"row {i} 超出场地范围")
            for j in range(i + 1, len(self.rows)):
                if _rectangles_overlap(fp, self.rows[j].footprint()):
                    problems.append(f"row {i} 与 row {j} 重叠")
        if problems:
            raise ConfigurationError(f"布局非法: {'; '.join(problems)}", error_code="INVALID_LAYOUT",
                                     details={"overlaps": problems})
        return self

    # ---------- 表面属性 ----------

    def _noise(self) -> np.ndarray:
        if self._texture is None:
            xmin, xmax, ymin, ymax = self.extent
            shape = (int(np.ceil((xmax - xmin) / TEXTURE_CELL_M)) + 2, int(np.ceil((ymax - ymin) / TEXTURE_CELL_M)) + 2)
            self._texture = np.random.default_rng(self.texture_seed).uniform(-1.0, 1.0, shape)
        return self._texture

    def marking_mask(self, xy: np.ndarray) -> np.ndarray:
        """地面点是否落在标线矩形内（方头线段，半宽 line_width/2）"""
        xy = np.asarray(xy, dtype=np.float64)
        mask = np.zeros(len(xy), dtype=bool)
        for row in self.rows:
            hw = row.line_width / 2.0
            for p, q in row.segments():
                seg = q - p
                length = np.linalg.norm(seg)
                e = seg / length
                rel = xy - p
                along = rel @ e
                across = np.abs(rel @ np.array([-e[1], e[0]]))
                mask |= (along >= -hw) & (along <= length + hw) & (across <= hw)
        return mask

    def ground_albedo(self, xy: np.ndarray) -> np.ndarray:
        """(N, 2) → (N, 3)：低频纹理地面 + 标线"""
        xmin, _, ymin, _ = self.extent
        coords = [(xy[:, 0] - xmin) / TEXTURE_CELL_M, (xy[:, 1] - ymin) / TEXTURE_CELL_M]
        n = ndimage.map_coordinates(self._noise(), coords, order=1, mode='nearest')
        albedo = np.asarray(GROUND_ALBEDO)[None] * (1.0 + TEXTURE_AMPLITUDE * n[:, None] / np.mean(GROUND_ALBEDO))
        albedo[self.marking_mask(xy)] = MARKING_ALBEDO
        return albedo

    def sample_points(self, count: int, rng: np.random.Generator) -> PointSource:
        """场景初始化点源：85% 地面（含标线）+ 15% 长方体表面，颜色为受光照后的反照率"""
        n_box = int(round(0.15 * count)) if self.boxes else 0
        n_ground = count - n_box
        xmin, xmax, ymin, ymax = self.extent
        xy = np.column_stack([rng.uniform(xmin, xmax, n_ground), rng.uniform(ymin, ymax, n_ground)])
        points = [np.column_stack([xy, np.zeros(n_ground)])]
        colors = [self.ground_albedo(xy)]
        if n_box:
            areas = np.array([2 * (b.size[0] * b.size[2] + b.size[1] * b.size[2]) for b in self.boxes])
            which = rng.choice(len(self.boxes), size=n_box, p=areas / areas.sum())
            for k, box in enumerate(self.boxes):
                m = int(np.sum(which == k))
                if m == 0:
                    continue
                pts = rng.uniform(box.low, box.high, (m, 3))
                face = rng.integers(0, 2, m)
                pts[face == 0, 0] = np.where(rng.random(int(np.sum(face == 0))) < 0.5, box.low[0], box.high[0])
                pts[face == 1, 1] = np.where(rng.random(int(np.sum(face == 1))) < 0.5, box.low[1], box.high[1])
                points.append(pts)
                colors.append(np.tile(box.albedo, (m, 1)))
        return PointSource(np.concatenate(points), np.clip(np.concatenate(colors) * self.lighting, 0.0, 1.0))


def _rectangles_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """分离轴判定两个凸四边形是否相交"""
    for poly in (a, b):
        for i in range(4):
            edge = poly[(i + 1) % 4] - poly[i]
            axis = np.array([-edge[1], edge[0]])
            pa, pb = a @ axis, b @ axis
            if pa.max() <= pb.min() or pb.max() <= pa.min():
                return False
    return True


def default_layout(rows: int = 2, slots_per_row: int = 6, slot_width: float = 2.6, slot_depth: float = 5.2,
                   line_width: float = 0.15, lighting: float = 1.0, seed: int = 0,
                   aisle_half_width: float = 3.0) -> ParkingLayout:
    """桌面规模默认场景：沿 x 方向的通道两侧各一排车位，排后有墙、排端有柱"""
    length = slots_per_row * slot_width
    row_list, boxes = [], []
    for r in range(rows):
        side = 1.0 if r % 2 == 0 else -1.0
        x0 = -length / 2.0 + (r // 2) * (length + 3.0)
        row_list.append(SlotRow(origin=(x0, side * aisle_half_width), along=(1.0, 0.0), depth_dir=(0.0, side),
                                count=slots_per_row, slot_width=slot_width, slot_depth=slot_depth,
                                line_width=line_width))
        back = side * (aisle_half_width + slot_depth + 0.8)
        boxes.append(Box(center=(x0 + length / 2.0, back, 1.25), size=(length + 1.0, 0.3, 2.5)))
        boxes.append(Box(center=(x0 + length + 1.0, side * (aisle_half_width + 0.6), 1.25), size=(0.6, 0.6, 2.5),
                         albedo=(0.62, 0.5, 0.4)))
    xmax = max(12.0, (rows - 1) // 2 * (length + 3.0) + length / 2.0 + 6.0)
    extent = (-length / 2.0 - 6.0, xmax, -(aisle_half_width + slot_depth + 3.0), aisle_half_width + slot_depth + 3.0)
    return ParkingLayout(extent=extent, rows=row_list, boxes=boxes, texture_seed=seed, lighting=lighting)


def default_trajectory(frames: int = 64, step_m: float = 0.25, turn_deg: float = 20.0,
                       rate_hz: float = 10.0, start: Tuple[float, float] = (-7.0, 0.0)) -> List[Dict[str, float]]:
    """直行 + 末段转弯的轨迹，最后 25% 帧匀速转过 turn_deg"""
    straight = int(round(0.75 * frames))
    turn_step = np.deg2rad(turn_deg) / max(frames - straight, 1)
    x, y, yaw = float(start[0]), float(start[1]), 0.0
    out = []
    for k in range(frames):
        out.append({'frame_id': k, 'timestamp': k / rate_hz, 'x': x, 'y': y, 'yaw': yaw})
        if k >= straight:
            yaw += turn_step
        x += step_m * np.cos(yaw)
        y += step_m * np.sin(yaw)
    return out


# ---------- 光线投射 ----------

def _ray_boxes(origin: np.ndarray, dirs: np.ndarray, boxes: Sequence[Box]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """返回 (最近命中距离, 命中长方体序号, 命中面法向)，未命中距离为 inf"""
    n = len(dirs)
    best = np.full(n, np.inf)
    which = np.full(n, -1)
    normal = np.zeros((n, 3))
    safe = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    for k, box in enumerate(boxes):
        t1 = (box.low - origin) / safe
        t2 = (box.high - origin) / safe
        t_near = np.minimum(t1, t2)
        t_far = np.maximum(t1, t2)
        enter = t_near.max(axis=1)
        leave = t_far.min(axis=1)
        hit = (enter <= leave) & (enter > 1e-6) & (enter < best)
        axis = np.argmax(t_near, axis=1)
        best[hit] = enter[hit]
        which[hit] = k
        nrm = np.zeros((n, 3))
        nrm[np.arange(n), axis] = -np.sign(safe[np.arange(n), axis])
        normal[hit] = nrm[hit]
    return best, which, normal


def render_camera(layout: ParkingLayout, camera: FisheyeCamera, rig_pose, supersample: int = 4) -> np.ndarray:
    """
    解析光线投射渲染一路鱼眼图像（ss×ss 超采样平均）。

    :param rig_pose: 世界→车体 位姿
    :return: (h, w, 3) float64，[0, 1]
    """
    pose = camera.pose.compose(rig_pose)
    h, w = camera.height, camera.width
    offsets = (np.arange(supersample) + 0.5) / supersample - 0.5
    oy, ox = np.meshgrid(offsets, offsets, indexing='ij')
    v, u = np.mgrid[0:h, 0:w]
    pixels = np.stack([u.reshape(-1, 1) + ox.reshape(1, -1), v.reshape(-1, 1) + oy.reshape(1, -1)], axis=-1)
    pixels = pixels.reshape(-1, 2).astype(np.float64)

    rays, ok = camera.unproject_with_mask(pixels)
    dirs = rays @ pose.R
    origin = pose.center
    color = np.tile(np.asarray(SKY_RADIANCE), (len(dirs), 1))

    down = dirs[:, 2] < -1e-9
    t_ground = np.where(down, -origin[2] / np.where(down, dirs[:, 2], -1.0), np.inf)
    t_box, which, normal = _ray_boxes(origin, dirs, layout.boxes)

    ground_hit = np.isfinite(t_ground) & (t_ground < t_box)
    if ground_hit.any():
        xy = origin[:2] + t_ground[ground_hit, None] * dirs[ground_hit, :2]
        color[ground_hit] = layout.ground_albedo(xy)
    box_hit = (which >= 0) & ~ground_hit
    if box_hit.any():
        albedo = np.asarray([b.albedo for b in layout.boxes])[which[box_hit]]
        shade = 0.6 + 0.4 * np.clip(normal[box_hit] @ LIGHT_DIR, 0.0, 1.0)
        color[box_hit] = albedo * shade[:, None]
    color[~ok] = 0.0
    image = color.reshape(h * w, supersample * supersample, 3).mean(axis=1).reshape(h, w, 3)
    return np.clip(image * layout.lighting, 0.0, 1.0)


# ---------- 标注 ----------

def frame_annotations(layout: ParkingLayout, rig_pose, ipm: IpmConfig) -> List[SlotAnnotation]:
    """
    把世界系车位转换为该帧的 BEV 像素标注（两个入口点都在 BEV 范围内才保留）。

    点序满足：(p2 − p1) 按 (−e_v, e_u) 旋转 +90° 后指向车位纵深方向。
    """
    H, W = ipm.shape
    out = []
    R = rig_pose.R[:2, :2]
    for row in layout.rows:
        pts = row.entrance_points()
        local = np.concatenate([pts, np.zeros((len(pts), 1))], axis=1)
        bev = ipm.ground_to_bev(rig_pose.transform(local)[:, :2])
        d_vehicle = R @ np.asarray(row.depth_dir)
        d_bev = np.array([-d_vehicle[1], -d_vehicle[0]])
        angle = float(np.degrees(np.arctan2(d_bev[1], d_bev[0])) % 360.0)
        kind = SlotType(row.kind)
        for k in range(row.count):
            p1, p2 = bev[k], bev[k + 1]
            if not all(0 <= p[0] <= W - 1 and 0 <= p[1] <= H - 1 for p in (p1, p2)):
                continue
            e = p2 - p1
            if np.dot([-e[1], e[0]], d_bev) < 0:
                p1, p2 = p2, p1
            out.append(SlotAnnotation(tuple(p1), tuple(p2), angle, kind))
    return out


def world_slots(layout: ParkingLayout) -> List[Dict[str, Any]]:
    slots = []
    for r, row in enumerate(layout.rows):
        pts = row.entrance_points()
        for k in range(row.count):
            slots.append({'row': r, 'index': k, 'p1': pts[k].tolist(), 'p2': pts[k + 1].tolist(),
                          'depth_dir': list(row.depth_dir), 'type': row.kind})
    return slots


def generate(out_dir: str, layout: Optional[ParkingLayout] = None, trajectory: Optional[List[Dict]] = None,
             cameras: Optional[Sequence[FisheyeCamera]] = None, seed: int = 0, ipm: Optional[IpmConfig] = None,
             supersample: int = 4, threads: int = 1) -> str:
    """
    生成合成数据集。相同参数与种子逐字节一致。

    :return: 数据集目录
    """
    layout = replace(layout or default_layout(), texture_seed=seed).validate()
    trajectory = trajectory if trajectory is not None else default_trajectory()
    cameras = list(cameras) if cameras is not None else default_rig()
    ipm = ipm or IpmConfig(px_per_m=40.0)
    xmin, xmax, ymin, ymax = layout.extent
    for entry in trajectory:
        if not (xmin <= entry['x'] <= xmax and ymin <= entry['y'] <= ymax):
            raise ConfigurationError(f"轨迹帧 {entry['frame_id']} 位于场地之外", error_code="INVALID_TRAJECTORY")

    os.makedirs(out_dir, exist_ok=True)
    save_calibration(os.path.join(out_dir, 'calib.json'), cameras)
    for cam in cameras:
        os.makedirs(os.path.join(out_dir, cam.name), exist_ok=True)

    def render_frame(entry: Dict) -> List[Dict]:
        rig_pose = vehicle_pose(entry['x'], entry['y'], entry['yaw'])
        for cam in cameras:
            image = render_camera(layout, cam, rig_pose, supersample)
            write_image(os.path.join(out_dir, cam.name, FRAME_NAME.format(entry['frame_id'])), image)
        return [a.to_dict() for a in frame_annotations(layout, rig_pose, ipm)]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            annotations = list(pool.map(render_frame, trajectory))
    else:
        annotations = [render_frame(entry) for entry in trajectory]

    write_json(os.path.join(out_dir, 'trajectory.json'), {'rate_hz': 10, 'frames': trajectory})
    write_json(os.path.join(out_dir, 'slots.json'), {
        'slots': world_slots(layout),
        'ipm': {'px_per_m': ipm.px_per_m, 'bev_width': ipm.bev_width, 'bev_height': ipm.bev_height},
        'frames': {str(e['frame_id']): a for e, a in zip(trajectory, annotations)},
    })
    write_json(os.path.join(out_dir, 'layout.json'), layout.to_dict())
    logger.info(f"合成数据集已生成: {out_dir}, {len(trajectory)} 帧 × {len(cameras)} 路相机, "
                f"{sum(len(a) for a in annotations)} 个车位标注")
    return out_dir


def generate_from_settings(settings, out_dir: str) -> str:
    s = settings.synth
    layout = default_layout(s.rows, s.slots_per_row, s.slot_width, s.slot_depth, s.line_width, s.lighting, s.seed)
    return generate(out_dir, layout, default_trajectory(s.frames), default_rig(s.width, s.height), s.seed,
                    IpmConfig.from_settings(settings), s.supersample, settings.threads)
