"""
自定义异常类

定义了整个工具链可能抛出的异常类型，提供统一的错误处理机制。
每个异常类携带一个 CLI 退出码：1 = 用法/配置错误，2 = 数据错误，3 = 数值失败。
"""

import json
from typing import Optional, Dict, Any


class ParkGaussError(Exception):
    """所有工具链错误的基类"""

    exit_code = 2

    def __init__(
        self,
        message: str,
        error_code: Optional[str] = None,
        details: Optional[Dict[str, Any]] = None
    ):
        super().__init__(message)
        self.message = message
        self.error_code = error_code
        self.details = details or {}

    def __str__(self) -> str:
        if self.error_code:
            return f"[{self.error_code}] {self.message}"
        return self.message

    def to_json(self) -> str:
        """渲染为 CLI 写入标准错误的单行 JSON {code, message, context}"""
        context = {k: _jsonable(v) for k, v in self.details.items()}
        return json.dumps(
            {"code": self.error_code or type(self).__name__, "message": self.message, "context": context},
            ensure_ascii=False,
        )


def _jsonable(value: Any) -> Any:
    """把 numpy 数组等对象转换为可序列化的值"""
    if hasattr(value, "tolist"):
        return value.tolist()
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    return str(value)


class ConfigurationError(ParkGaussError):
    """配置错误（未知键、非法取值、教师/学生角色冲突）"""
    exit_code = 1


class UsageError(ConfigurationError):
    """命令行用法错误"""
    pass


class DataFormatError(ParkGaussError):
    """文件格式错误（魔数、头部、形状）"""
    pass


class ShapeMismatchError(DataFormatError):
    """数组形状不匹配"""
    pass


class DatasetError(ParkGaussError):
    """数据集目录结构或内容错误"""
    pass


class CameraModelError(ParkGaussError):
    """相机内参或位姿非法"""
    pass


class NumericalError(ParkGaussError):
    """数值失败"""
    exit_code = 3


class UnprojectionError(NumericalError):
    """鱼眼反投影的牛顿迭代未收敛"""

    def __init__(self, message: str, pixel: Any = None, residual: Optional[float] = None, **kwargs):
        details = kwargs.pop("details", None) or {}
        details.update({"pixel": pixel, "residual": residual})
        super().__init__(message, details=details, **kwargs)
        self.pixel = pixel
        self.residual = residual


class CholeskyError(NumericalError):
    """协方差矩阵非半正定"""

    def __init__(self, message: str, matrix: Any = None, **kwargs):
        details = kwargs.pop("details", None) or {}
        details["matrix"] = matrix
        super().__init__(message, details=details, **kwargs)
        self.matrix = matrix


class NonFiniteLossError(NumericalError):
    """损失出现 NaN/Inf"""

    def __init__(self, message: str, component: Optional[str] = None, **kwargs):
        details = kwargs.pop("details", None) or {}
        details["component"] = component
        super().__init__(message, details=details, **kwargs)
        self.component = component
