"""
鱼眼相机模型

- 等距投影 + 4 阶多项式畸变 (Kannala–Brandt 风格): d(θ) = θ(1 + k1θ² + k2θ⁴ + k3θ⁶ + k4θ⁸)。
- 位姿约定为 世界(车体)→相机: x_c = R·x_w + t，四元数按 (w, x, y, z) 存储。
- 所有类型构造后不可变，所有操作是纯函数，可以在多线程中自由使用。
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Any, List, Optional, Sequence, Tuple

import numpy as np

from common.exceptions import CameraModelError, UnprojectionError, DataFormatError

logger = logging.getLogger(__name__)

NEWTON_MAX_ITERS = 20
NEWTON_TOL = 1e-12
# 单调性检查的采样点数
_MONOTONIC_SAMPLES = 4096


# ---------------------------------------------------------------------------
# 四元数工具
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """
    四元数 (..., 4) [w, x, y, z] → 旋转矩阵 (..., 3, 3)。输入会先归一化。
    """
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotmat_backward(q: np.ndarray, grad_R: np.ndarray) -> np.ndarray:
    """
    旋转矩阵梯度 → 未归一化四元数梯度。

    :param q: (..., 4) 原始（可能未归一化）四元数
    :param grad_R: (..., 3, 3) 损失对 R 的梯度
    :return: (..., 4) 损失对 q 的梯度
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    G = grad_R
    gw = 2 * (-z * G[..., 0, 1] + y * G[..., 0, 2] + z * G[..., 1, 0]
              - x * G[..., 1, 2] - y * G[..., 2, 0] + x * G[..., 2, 1])
    gx = 2 * (y * G[..., 0, 1] + z * G[..., 0, 2] + y * G[..., 1, 0] - 2 * x * G[..., 1, 1]
              - w * G[..., 1, 2] + z * G[..., 2, 0] + w * G[..., 2, 1] - 2 * x * G[..., 2, 2])
    gy = 2 * (-2 * y * G[..., 0, 0] + x * G[..., 0, 1] + w * G[..., 0, 2] + x * G[..., 1, 0]
              + z * G[..., 1, 2] - w * G[..., 2, 0] + z * G[..., 2, 1] - 2 * y * G[..., 2, 2])
    gz = 2 * (-2 * z * G[..., 0, 0] - w * G[..., 0, 1] + x * G[..., 0, 2] + w * G[..., 1, 0]
              - 2 * z * G[..., 1, 1] + y * G[..., 1, 2] + x * G[..., 2, 0] + y * G[..., 2, 1])
    g_unit = np.stack([gw, gx, gy, gz], axis=-1)
    # 归一化的雅可比: (I - q̂q̂ᵀ)/|q|
    radial = np.sum(g_unit * qn, axis=-1, keepdims=True)
    return (g_unit - radial * qn) / norm


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """旋转矩阵 → 单位四元数 [w, x, y, z]（w ≥ 0）"""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    q = quat_normalize(q)
    return -q if q[0] < 0 else q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton 积 a ⊗ b"""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


# ---------------------------------------------------------------------------
# 位姿
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    """刚体位姿 世界→相机: x_c = R·x_w + t"""
    rotation: Tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)   # 单位四元数 (w, x, y, z)
    translation: Tuple[float, float, float] = (0.0, 0.0, 0.0)            # 米

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64)
        norm = float(np.linalg.norm(q))
        if q.shape != (4,) or not np.isfinite(norm) or norm < 1e-12:
            raise CameraModelError(f"非法旋转四元数: {self.rotation}", error_code="BAD_POSE")
        t = np.asarray(self.translation, dtype=np.float64)
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise CameraModelError(f"非法平移: {self.translation}", error_code="BAD_POSE")
        object.__setattr__(self, 'rotation', tuple(float(v) for v in q / norm))
        object.__setattr__(self, 'translation', tuple(float(v) for v in t))

    @classmethod
    def identity(cls) -> 'Pose':
        return cls()

    @classmethod
    def from_matrix(cls, R: np.ndarray, t: np.ndarray) -> 'Pose':
        return cls(tuple(rotmat_to_quat(R)), tuple(np.asarray(t, dtype=np.float64)))

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(np.asarray(self.rotation))

    @property
    def t(self) -> np.ndarray:
        return np.asarray(self.translation, dtype=np.float64)

    @property
    def center(self) -> np.ndarray:
        """相机中心在世界系中的坐标 c = -Rᵀt"""
        return -self.R.T @ self.t

    def transform(self, points: np.ndarray) -> np.ndarray:
        """世界 → 相机, points: (..., 3)"""
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def inverse_transform(self, points: np.ndarray) -> np.ndarray:
        """相机 → 世界"""
        return (np.asarray(points, dtype=np.float64) - self.t) @ self.R

    def inverse(self) -> 'Pose':
        w, x, y, z = self.rotation
        return Pose((w, -x, -y, -z), tuple(-self.R.T @ self.t))

    def compose(self, other: 'Pose') -> 'Pose':
        """self ∘ other：先应用 other，再应用 self"""
        # R(a⊗b) = R(a)R(b)
        q = quat_multiply(np.asarray(self.rotation), np.asarray(other.rotation))
        return Pose(tuple(q), tuple(self.R @ other.t + self.t))

    def to_dict(self) -> Dict[str, Any]:
        return {'q_wxyz': list(self.rotation), 't_xyz': list(self.translation)}


# ---------------------------------------------------------------------------
# 内参
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FisheyeIntrinsics:
    """鱼眼内参与等距畸变系数"""
    fx: float
    fy: float
    cx: float
    cy: float
    k: Tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    width: int = 320
    height: int = 240
    max_half_fov_deg: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, 'k', tuple(float(v) for v in self.k))
        if len(self.k) != 4:
            raise CameraModelError("畸变系数必须是 4 个 (k1..k4)", error_code="BAD_INTRINSICS")
        if not (self.fx > 0 and self.fy > 0):
            raise CameraModelError(f"焦距必须为正: fx={self.fx}, fy={self.fy}", error_code="BAD_INTRINSICS")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise CameraModelError(f"主点 ({self.cx}, {self.cy}) 不在图像 {self.width}x{self.height} 内",
                                   error_code="BAD_INTRINSICS")
        if self.max_half_fov_deg < 100.0:
            raise CameraModelError(f"半视场角 {self.max_half_fov_deg}° 小于 100°", error_code="BAD_INTRINSICS")
        theta = np.linspace(0.0, self.theta_max, _MONOTONIC_SAMPLES)
        if np.any(self.distort_derivative(theta) <= 0):
            raise CameraModelError("畸变多项式在视场内不单调递增", error_code="NON_MONOTONIC",
                                   details={"k": list(self.k), "theta_max": self.theta_max})

    @property
    def theta_max(self) -> float:
        return float(np.deg2rad(self.max_half_fov_deg))

    def distort(self, theta: np.ndarray) -> np.ndarray:
        k1, k2, k3, k4 = self.k
        t2 = theta * theta
        return theta * (1.0 + t2 * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4))))

    def distort_derivative(self, theta: np.ndarray) -> np.ndarray:
        k1, k2, k3, k4 = self.k
        t2 = theta * theta
        return 1.0 + t2 * (3 * k1 + t2 * (5 * k2 + t2 * (7 * k3 + t2 * 9 * k4)))

    def solve_theta(self, d_obs: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        牛顿迭代求解 d(θ) = d_obs。

        Returns:
            (theta, converged, residual)
        """
        d_obs = np.asarray(d_obs, dtype=np.float64)
        target = d_obs.reshape(-1)
        theta = target.copy()
        active = np.arange(target.size)
        for _ in range(NEWTON_MAX_ITERS):
            if active.size == 0:
                break
            th = theta[active]
            step = (self.distort(th) - target[active]) / self.distort_derivative(th)
            theta[active] = np.clip(th - step, 0.0, self.theta_max)
            active = active[np.abs(step) >= NEWTON_TOL]
        residual = np.abs(self.distort(theta) - target)
        converged = np.ones(target.size, dtype=bool)
        converged[active] = residual[active] < 1e-12
        shape = d_obs.shape
        return theta.reshape(shape), converged.reshape(shape), residual.reshape(shape)


# ---------------------------------------------------------------------------
# 相机
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FisheyeCamera:
    """带外参的鱼眼相机。pose 为 车体→相机。"""
    name: str
    intrinsics: FisheyeIntrinsics
    pose: Pose = field(default_factory=Pose)

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    def project(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        相机坐标系 3D 点 → 像素。

        Args:
            points: (..., 3) 相机系坐标（米）

        Returns:
            (pixels (..., 2), in_fov (...,) 布尔)。θ ≥ θ_max 的点标记为视场外，由调用者剔除。
        """
        p = np.asarray(points, dtype=np.float64)
        x, y, z = p[..., 0], p[..., 1], p[..., 2]
        r = np.hypot(x, y)
        theta = np.arctan2(r, z)
        intr = self.intrinsics
        d = intr.distort(theta)
        small = r < 1e-12 * np.maximum(np.abs(z), 1e-300)
        # r→0 时 d/r → 1/z
        scale = np.where(small, 1.0 / np.where(z == 0, 1.0, z), d / np.where(small, 1.0, r))
        u = intr.fx * scale * x + intr.cx
        v = intr.fy * scale * y + intr.cy
        in_fov = (theta < intr.theta_max) & ~(small & (z <= 0))
        return np.stack([u, v], axis=-1), in_fov

    def project_jacobian(self, points: np.ndarray) -> np.ndarray:
        """
        投影对相机系点的解析雅可比 (..., 2, 3)。
        """
        p = np.asarray(points, dtype=np.float64)
        x, y, z = p[..., 0], p[..., 1], p[..., 2]
        intr = self.intrinsics
        r2 = x * x + y * y
        r = np.sqrt(r2)
        rho2 = r2 + z * z
        theta = np.arctan2(r, z)
        d = intr.distort(theta)
        dd = intr.distort_derivative(theta)
        k1 = intr.k[0]
        small = r < 1e-9 * np.sqrt(rho2)
        r_safe = np.where(small, 1.0, r)
        f = np.where(small, 1.0 / z, d / r_safe)
        # f_r / r，小半径时取级数展开极限 2(k1 - 1/3)/z³
        fr_over_r = np.where(small, 2.0 * (k1 - 1.0 / 3.0) / z ** 3,
                             (dd * (z / rho2) * r_safe - d) / (r_safe ** 3))
        fz = -dd / rho2
        J = np.empty(p.shape[:-1] + (2, 3))
        J[..., 0, 0] = intr.fx * (f + x * x * fr_over_r)
        J[..., 0, 1] = intr.fx * x * y * fr_over_r
        J[..., 0, 2] = intr.fx * x * fz
        J[..., 1, 0] = intr.fy * x * y * fr_over_r
        J[..., 1, 1] = intr.fy * (f + y * y * fr_over_r)
        J[..., 1, 2] = intr.fy * y * fz
        return J

    def _normalized(self, pixels: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        px = np.asarray(pixels, dtype=np.float64)
        mx = (px[..., 0] - self.intrinsics.cx) / self.intrinsics.fx
        my = (px[..., 1] - self.intrinsics.cy) / self.intrinsics.fy
        return mx, my, np.hypot(mx, my)

    def _rays(self, mx, my, rho, theta) -> np.ndarray:
        safe = np.where(rho > 0, rho, 1.0)
        s = np.sin(theta)
        return np.stack([np.where(rho > 0, s * mx / safe, 0.0),
                         np.where(rho > 0, s * my / safe, 0.0),
                         np.cos(theta)], axis=-1)

    def unproject(self, pixels: np.ndarray) -> np.ndarray:
        """
        像素 → 相机系单位射线，牛顿法反解畸变多项式。

        Raises:
            UnprojectionError: 牛顿迭代未收敛（携带像素与残差）
        """
        mx, my, rho = self._normalized(pixels)
        theta, converged, residual = self.intrinsics.solve_theta(rho)
        bad = ~converged | (rho > self.intrinsics.distort(self.intrinsics.theta_max) + 1e-12)
        if np.any(bad):
            first = int(np.flatnonzero(bad.reshape(-1))[0])
            pixel = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)[first]
            res = float(residual.reshape(-1)[first])
            raise UnprojectionError(f"像素 {pixel.tolist()} 的反投影未收敛 (残差 {res:.3e})",
                                    pixel=pixel, residual=res, error_code="NEWTON_DIVERGED")
        return self._rays(mx, my, rho, theta)

    def unproject_with_mask(self, pixels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        向量化反投影：超出有效视场锥或未收敛的像素标记为无效而不抛异常。
        """
        mx, my, rho = self._normalized(pixels)
        limit = self.intrinsics.distort(self.intrinsics.theta_max)
        theta, converged, _ = self.intrinsics.solve_theta(np.minimum(rho, limit))
        valid = converged & (rho < limit)
        return self._rays(mx, my, rho, theta), valid

    def to_dict(self) -> Dict[str, Any]:
        intr = self.intrinsics
        out = {'name': self.name, 'fx': intr.fx, 'fy': intr.fy, 'cx': intr.cx, 'cy': intr.cy,
               'k': list(intr.k), 'width': intr.width, 'height': intr.height,
               'max_half_fov_deg': intr.max_half_fov_deg}
        out.update(self.pose.to_dict())
        return out

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'FisheyeCamera':
        try:
            intr = FisheyeIntrinsics(fx=float(data['fx']), fy=float(data['fy']),
                                     cx=float(data['cx']), cy=float(data['cy']),
                                     k=tuple(data['k']), width=int(data['width']),
                                     height=int(data['height']),
                                     max_half_fov_deg=float(data.get('max_half_fov_deg', 100.0)))
            pose = Pose(tuple(data['q_wxyz']), tuple(data['t_xyz']))
        except KeyError as e:
            raise DataFormatError(f"标定条目缺少字段 {e}", error_code="BAD_CALIB",
                                  details={"camera": data.get('name')}) from e
        return cls(name=str(data['name']), intrinsics=intr, pose=pose)


def look_at_pose(center: Sequence[float], yaw_deg: float, pitch_down_deg: float) -> Pose:
    """
    构造 车体→相机 位姿。车体系 x 前、y 左、z 上；相机系 z 为光轴、x 右、y 下。

    :param center: 相机中心在车体系中的坐标
    :param yaw_deg: 光轴绕 z 轴的朝向（0 = 车头方向）
    :param pitch_down_deg: 光轴向下俯仰角
    """
    yaw, pitch = np.deg2rad(yaw_deg), np.deg2rad(pitch_down_deg)
    forward = np.array([np.cos(yaw) * np.cos(pitch), np.sin(yaw) * np.cos(pitch), -np.sin(pitch)])
    right = np.cross(forward, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return Pose.from_matrix(R, -R @ np.asarray(center, dtype=np.float64))


def default_rig(width: int = 320, height: int = 240) -> List[FisheyeCamera]:
    """四路环视鱼眼的默认装配（前、后、左、右后视镜位置）"""
    scale = width / 320.0
    k = (0.02, -0.004, 0.0005, 0.0)
    mounts = [
        ('front', (2.0, 0.0, 0.8), 0.0, 35.0),
        ('rear', (-1.0, 0.0, 0.9), 180.0, 35.0),
        ('left', (0.9, 0.95, 1.0), 90.0, 55.0),
        ('right', (0.9, -0.95, 1.0), -90.0, 55.0),
    ]
    rig = []
    for name, center, yaw, pitch in mounts:
        intr = FisheyeIntrinsics(fx=85.0 * scale, fy=85.0 * scale, cx=(width - 1) / 2.0,
                                 cy=(height - 1) / 2.0, k=k, width=width, height=height)
        rig.append(FisheyeCamera(name=name, intrinsics=intr, pose=look_at_pose(center, yaw, pitch)))
    return rig


def load_calibration(path: str) -> List[FisheyeCamera]:
    """读取标定 JSON（相机对象列表，或 {"cameras": [...]}）"""
    with open(path, 'r', encoding='utf-8') as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as e:
            raise DataFormatError(f"标定文件 JSON 格式错误: {path}: {e}", error_code="BAD_JSON") from e
    entries = data['cameras'] if isinstance(data, dict) else data
    cameras = [FisheyeCamera.from_dict(entry) for entry in entries]
    logger.info(f"已加载 {len(cameras)} 路相机标定: {[c.name for c in cameras]}")
    return cameras


def save_calibration(path: str, cameras: Sequence[FisheyeCamera]) -> None:
    with open(path, 'w', encoding='utf-8') as fh:
        json.dump({'cameras': [c.to_dict() for c in cameras]}, fh, indent=2)
