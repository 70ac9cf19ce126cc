"""
感知后端工厂

使用工厂模式创建不同的车位感知后端实例。
支持通过配置 (Settings.perception) 或参数动态创建后端。
"""

from typing import Dict, List, Type

from common.exceptions import ConfigurationError
from .analytic_detector import AnalyticPerception
from .base import SlotPerception
from .external import ExternalPerception


class PerceptionFactory:
    """感知后端工厂类"""

    # 注册的感知后端类
    _backends: Dict[str, Type[SlotPerception]] = {
        'analytic': AnalyticPerception,
        'external': ExternalPerception,
    }

    @classmethod
    def create(cls, backend_name: str, **kwargs) -> SlotPerception:
        """
        创建感知后端实例

        Args:
            backend_name: 后端名称（如 'analytic', 'external'）
            **kwargs: 后端构造参数

        Raises:
            ConfigurationError: 不支持的后端
        """
        backend_name = backend_name.lower()
        if backend_name not in cls._backends:
            supported = ', '.join(cls._backends.keys())
            raise ConfigurationError(f"不支持的感知后端: \"{backend_name}\"。支持的后端: {supported}",
                                     error_code="UNKNOWN_BACKEND")
        return cls._backends[backend_name](**kwargs)

    @classmethod
    def from_settings(cls, settings, backend_name: str = None) -> SlotPerception:
        """
        从有效配置创建后端

        Args:
            settings: common.settings.Settings
            backend_name: 覆盖配置中的后端名称
        """
        p = settings.perception
        name = (backend_name or p.backend).lower()
        common = {'confidence_threshold': p.confidence_threshold, 'nms_radius': p.nms_radius,
                  'stride': p.stride}
        if name == 'external':
            shape = (settings.ipm.bev_height // p.stride, settings.ipm.bev_width // p.stride)
            return cls.create(name, external_dir=p.external_dir, field_shape=shape, **common)
        if name == 'analytic':
            return cls.create(name, template_size=p.template_size, orientations=p.orientations,
                              temperature=p.temperature, gain=p.gain, bias=p.bias, edge_samples=p.edge_samples,
                              edge_gain=p.edge_gain, edge_bias=p.edge_bias, **common)
        return cls.create(name, **common)

    @classmethod
    def register_backend(cls, backend_name: str, backend_class: Type[SlotPerception]):
        cls._backends[backend_name.lower()] = backend_class

    @classmethod
    def get_supported_backends(cls) -> List[str]:
        return list(cls._backends.keys())

    @classmethod
    def is_supported(cls, backend_name: str) -> bool:
        return backend_name.lower() in cls._backends
