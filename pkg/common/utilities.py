"""
工具 (Utility) 层

- 提供与具体业务无关的、可重用的"纯函数"。
- 例如：日志配置、图像文件读写、二进制头部编解码、数值小工具、终端表格格式化等。
"""
import hashlib
import json
import logging
import os
import struct
from typing import Any, Dict, Iterable, List, Optional, Tuple

import numpy as np
from PIL import Image

from common.exceptions import DataFormatError, ShapeMismatchError

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

# 小端二进制头部：4 字节魔数 + 三个 u32
_HEADER = struct.Struct('<4sIII')


def setup_logging(level: str = "INFO", log_file: Optional[str] = None) -> None:
    """
    配置根日志记录器。

    :param level: 日志级别名称
    :param log_file: 可选的日志文件路径（目录不存在时自动创建）
    """
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file:
        os.makedirs(os.path.dirname(os.path.abspath(log_file)), exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding='utf-8'))
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO),
                        format=LOG_FORMAT, handlers=handlers, force=True)


def write_header(fh, magic: bytes, a: int, b: int, c: int) -> None:
    fh.write(_HEADER.pack(magic, a, b, c))


def read_header(fh, magic: bytes, path: Optional[str] = None) -> Tuple[int, int, int]:
    """读取并校验 {魔数, u32, u32, u32} 头部，PGIM/PGHM/PGSC/PGIP 共用"""
    what = magic.decode('ascii')
    details = {"path": path} if path else {}
    raw = fh.read(_HEADER.size)
    if len(raw) != _HEADER.size:
        raise DataFormatError(f"{what} 文件头部不完整", error_code="BAD_HEADER", details=details)
    got, a, b, c = _HEADER.unpack(raw)
    if got != magic:
        raise DataFormatError(f"{what} 魔数不匹配: {got!r} != {magic!r}", error_code="BAD_MAGIC", details=details)
    return a, b, c


def write_pgim(path: str, image: np.ndarray) -> None:
    """
    写入原始 f32 图像缓冲区: {magic "PGIM", w, h, c} + 小端 f32 (H×W×C 行优先)。
    """
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[..., None]
    h, w, c = image.shape
    with open(path, 'wb') as fh:
        write_header(fh, b'PGIM', w, h, c)
        fh.write(image.astype('<f4').tobytes())


def read_pgim(path: str) -> np.ndarray:
    """读取 PGIM 文件，返回 H×W×C 的 float32 数组"""
    with open(path, 'rb') as fh:
        w, h, c = read_header(fh, b'PGIM', path)
        data = np.frombuffer(fh.read(), dtype='<f4')
    if data.size != w * h * c:
        raise ShapeMismatchError(f"PGIM 数据长度 {data.size} 与头部 {h}x{w}x{c} 不符",
                                 error_code="BAD_SHAPE")
    return data.reshape(h, w, c).astype(np.float32)


def write_pghm(path: str, planes: np.ndarray) -> None:
    """
    写入热力图文件: {magic "PGHM", h, w, c} + c 个 h×w 的小端 f32 平面。

    :param planes: 形状 (c, h, w) 或 (h, w) 的数组
    """
    planes = np.asarray(planes)
    if planes.ndim == 2:
        planes = planes[None]
    c, h, w = planes.shape
    with open(path, 'wb') as fh:
        write_header(fh, b'PGHM', h, w, c)
        fh.write(planes.astype('<f4').tobytes())


def read_pghm(path: str) -> np.ndarray:
    """读取 PGHM 文件，返回 (c, h, w) 的 float32 数组"""
    with open(path, 'rb') as fh:
        h, w, c = read_header(fh, b'PGHM', path)
        data = np.frombuffer(fh.read(), dtype='<f4')
    if data.size != h * w * c:
        raise ShapeMismatchError(f"PGHM 数据长度 {data.size} 与头部 {c}x{h}x{w} 不符",
                                 error_code="BAD_SHAPE")
    return data.reshape(c, h, w).copy()


def read_image(path: str) -> np.ndarray:
    """读取 PNG 图像为 [0,1] 范围的 float64 H×W×3 数组"""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with Image.open(path) as img:
        arr = np.asarray(img.convert('RGB'), dtype=np.float64) / 255.0
    return arr


def write_image(path: str, image: np.ndarray) -> None:
    """把 [0,1] 范围的浮点图像写成 8 位 PNG（单通道按灰度写出）"""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[..., 0]
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(data).save(path)


def read_json(path: str) -> Any:
    """读取 JSON 文件，格式错误时抛出带路径信息的 DataFormatError"""
    try:
        with open(path, 'r', encoding='utf-8') as fh:
            return json.load(fh)
    except json.JSONDecodeError as e:
        raise DataFormatError(f"JSON 格式错误: {path}: {e}", error_code="BAD_JSON",
                              details={"path": path}) from e


def write_json(path: str, payload: Any) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', encoding='utf-8') as fh:
        json.dump(payload, fh, indent=2, ensure_ascii=False, sort_keys=True)


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def package_versions(names: Iterable[str] = ('numpy', 'scipy', 'pandas', 'click', 'PIL')) -> Dict[str, str]:
    """收集依赖包版本，写入运行清单"""
    versions = {}
    for name in names:
        try:
            module = __import__(name)
            versions[name] = getattr(module, '__version__', 'unknown')
        except ImportError:
            versions[name] = 'missing'
    return versions


def format_gradcheck_table(report: Dict[str, Any]) -> str:
    """
    把梯度检查报告格式化为终端表格。

    :param report: trainer.grad_check 返回的报告字典
    :return: 格式化的字符串
    """
    lines = []
    lines.append("=" * 78)
    lines.append(f"{'分量':<10} {'参数组':<16} {'最大相对误差':>14} {'阈值':>10} {'结果':>8}")
    lines.append("-" * 78)
    for row in report['rows']:
        status = "✅" if row['passed'] else "❌"
        lines.append(f"{row['component']:<10} {row['group']:<16} {row['max_rel_error']:>14.3e} "
                     f"{row['tolerance']:>10.1e} {status:>8}")
    lines.append("-" * 78)
    worst = report.get('worst')
    if worst:
        lines.append(f"最差项: {worst['component']}/{worst['group']} "
                     f"(相对误差 {worst['max_rel_error']:.3e})")
    lines.append("=" * 78)
    return "\n".join(lines)


def format_eval_report(report: Dict[str, Any]) -> str:
    """把评估报告格式化为终端输出"""
    lines = ["📊 评估结果:", "=" * 40]
    lines.append(f"PSNR:      {report['psnr']:.3f} dB")
    lines.append(f"SSIM:      {report['ssim']:.4f}")
    if report.get('precision') is not None:
        lines.append(f"Precision: {report['precision']:.4f}")
        lines.append(f"Recall:    {report['recall']:.4f}")
    lines.append(f"帧数:      {len(report.get('per_frame', []))}")
    return "\n".join(lines)
