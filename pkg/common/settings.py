"""
配置层

- 读取 INI（configparser）或 JSON（{section: {key: value}}）配置文件。
- 每个 section 对应一个带默认值的 dataclass；未知 section/键一律拒绝。
- 合并顺序：默认值 ← 配置文件 ← 命令行覆盖 (section.key=value)。
- dump_settings 写出的 INI 重新加载后得到完全相同的有效配置。
"""

import configparser
import io
import json
import logging
import os
from dataclasses import dataclass, field, fields, asdict
from typing import Any, Dict, Iterable, Optional, Tuple, get_type_hints

from common.exceptions import ConfigurationError

logger = logging.getLogger(__name__)

SLOT_MODES = ('off', 'direct-ipm-l1', 'feature-only', 'teacher-only', 'student-only', 'full')
FUSION_MODES = ('nearest', 'feathered')
KL_DIRECTIONS = ('forward', 'reverse', 'symmetric')
EDGE_AGGREGATIONS = ('max', 'sum')
TEACHER_SOURCES = ('detector', 'annotations', 'external')
MATCH_STRATEGIES = ('greedy', 'optimal')


@dataclass
class SceneSettings:
    count: int = 4000
    sh_degree: int = 2
    init_opacity: float = 0.1
    knn: int = 3


@dataclass
class RendererSettings:
    tile_size: int = 16
    transmittance_min: float = 1e-4
    low_pass: float = 0.3
    near_clip: float = 0.05
    radius_sigmas: float = 3.0
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    ut_alpha: float = 1.0
    ut_beta: float = 2.0
    ut_kappa: float = 0.0


@dataclass
class IpmSettings:
    px_per_m: float = 40.0
    bev_width: int = 320
    bev_height: int = 400
    fusion_mode: str = 'nearest'


@dataclass
class PerceptionSettings:
    backend: str = 'analytic'
    stride: int = 4
    template_size: int = 9
    orientations: int = 16
    temperature: float = 10.0
    gain: float = 8.0
    bias: float = 4.0
    confidence_threshold: float = 0.25
    nms_radius: float = 2.0
    edge_samples: int = 32
    edge_gain: float = 8.0
    edge_bias: float = 4.0
    teacher_source: str = 'detector'
    external_dir: str = ''


@dataclass
class SlotWeightSettings:
    tau: float = 0.25
    temperature: float = 0.5
    gamma: float = 1.0
    alpha: float = 0.8
    beta: float = 0.8
    top_k_edges: int = 8
    sigma_tube: float = 1.5
    tube_samples: int = 32
    min_edge_score: float = 0.5
    lambda_edge: float = 0.5
    edge_aggregation: str = 'max'
    stop_gradient: bool = True


@dataclass
class LossSettings:
    lambda_dssim: float = 0.2
    lambda_align: float = 0.001
    lambda_ipm: float = 0.1
    lambda_cam: float = 0.1
    topk_k: int = 512
    kl_direction: str = 'forward'


@dataclass
class EvaluationSettings:
    match_distance: float = 10.0
    match_angle: float = 10.0
    match_confidence: float = 0.5
    match_strategy: str = 'greedy'


@dataclass
class TrainerSettings:
    total_iters: int = 30000
    phase1_iters: int = 20000
    lr_position: float = 1.6e-4
    lr_position_final_ratio: float = 0.01
    lr_sh: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scales: float = 5e-3
    lr_rotation: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    seed: int = 0
    slot_mode: str = 'full'
    holdout_every: int = 10
    eval_every: int = 500
    log_every: int = 10
    checkpoint_every: int = 1000


@dataclass
class SynthSettings:
    frames: int = 64
    width: int = 320
    height: int = 240
    rows: int = 2
    slots_per_row: int = 6
    slot_width: float = 2.6
    slot_depth: float = 5.2
    line_width: float = 0.15
    lighting: float = 1.0
    supersample: int = 4
    seed: int = 0


@dataclass
class RuntimeSettings:
    threads: int = 0
    log_level: str = 'INFO'


@dataclass
class Settings:
    """完整的有效配置"""
    scene: SceneSettings = field(default_factory=SceneSettings)
    renderer: RendererSettings = field(default_factory=RendererSettings)
    ipm: IpmSettings = field(default_factory=IpmSettings)
    perception: PerceptionSettings = field(default_factory=PerceptionSettings)
    slotweights: SlotWeightSettings = field(default_factory=SlotWeightSettings)
    losses: LossSettings = field(default_factory=LossSettings)
    evaluation: EvaluationSettings = field(default_factory=EvaluationSettings)
    trainer: TrainerSettings = field(default_factory=TrainerSettings)
    synth: SynthSettings = field(default_factory=SynthSettings)
    runtime: RuntimeSettings = field(default_factory=RuntimeSettings)

    def section(self, name: str) -> Any:
        if name not in self.section_names():
            raise ConfigurationError(f"未知配置段: [{name}]", error_code="UNKNOWN_SECTION",
                                     details={"section": name})
        return getattr(self, name)

    @staticmethod
    def section_names() -> Tuple[str, ...]:
        return tuple(f.name for f in fields(Settings))

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return asdict(self)

    def validate(self) -> 'Settings':
        """取值范围校验，失败抛 ConfigurationError"""
        checks = [
            (self.trainer.phase1_iters <= self.trainer.total_iters, "trainer.phase1_iters 不能大于 total_iters"),
            (self.trainer.total_iters >= 0 and self.trainer.phase1_iters >= 0, "迭代次数不能为负"),
            (min(self.trainer.lr_position, self.trainer.lr_sh, self.trainer.lr_opacity,
                 self.trainer.lr_scales, self.trainer.lr_rotation) >= 0, "学习率不能为负"),
            (self.trainer.slot_mode in SLOT_MODES, f"trainer.slot_mode 必须是 {SLOT_MODES} 之一"),
            (self.trainer.holdout_every >= 2, "trainer.holdout_every 必须 ≥ 2"),
            (self.ipm.fusion_mode in FUSION_MODES, f"ipm.fusion_mode 必须是 {FUSION_MODES} 之一"),
            (self.ipm.px_per_m > 0 and self.ipm.bev_width > 0 and self.ipm.bev_height > 0, "IPM 尺寸必须为正"),
            (self.losses.kl_direction in KL_DIRECTIONS, f"losses.kl_direction 必须是 {KL_DIRECTIONS} 之一"),
            (min(self.losses.lambda_dssim, self.losses.lambda_align, self.losses.lambda_ipm,
                 self.losses.lambda_cam) >= 0, "损失权重不能为负"),
            (self.losses.topk_k > 0, "losses.topk_k 必须为正"),
            (self.slotweights.edge_aggregation in EDGE_AGGREGATIONS,
             f"slotweights.edge_aggregation 必须是 {EDGE_AGGREGATIONS} 之一"),
            (self.slotweights.lambda_edge >= 0, "slotweights.lambda_edge 不能为负"),
            (0 <= self.slotweights.alpha <= 1 and 0 <= self.slotweights.beta <= 1, "混合系数必须在 [0,1]"),
            (self.slotweights.temperature > 0 and self.slotweights.sigma_tube > 0, "温度与管宽必须为正"),
            (self.perception.teacher_source in TEACHER_SOURCES,
             f"perception.teacher_source 必须是 {TEACHER_SOURCES} 之一"),
            (self.perception.stride >= 1, "perception.stride 必须 ≥ 1"),
            (min(self.evaluation.match_distance, self.evaluation.match_angle,
                 self.evaluation.match_confidence) > 0, "匹配阈值必须为正"),
            (self.evaluation.match_strategy in MATCH_STRATEGIES,
             f"evaluation.match_strategy 必须是 {MATCH_STRATEGIES} 之一"),
            (self.scene.count >= 1, "scene.count 必须 ≥ 1"),
            (0 <= self.scene.sh_degree <= 3, "scene.sh_degree 必须在 0..3"),
            (self.renderer.tile_size >= 1, "renderer.tile_size 必须 ≥ 1"),
            (self.runtime.threads >= 0, "runtime.threads 不能为负"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigurationError(message, error_code="INVALID_CONFIG")
        return self

    @property
    def threads(self) -> int:
        return self.runtime.threads or (os.cpu_count() or 1)


def _coerce(section: str, key: str, type_hint: Any, raw: Any) -> Any:
    """把字符串/JSON 值转换为字段声明的类型"""
    try:
        if type_hint is bool:
            if isinstance(raw, bool):
                return raw
            text = str(raw).strip().lower()
            if text not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(raw)
            return configparser.ConfigParser.BOOLEAN_STATES[text]
        if type_hint is int:
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return int(str(raw).strip()) if not isinstance(raw, (int, float)) else int(raw)
        if type_hint is float:
            return float(raw)
        if type_hint is str:
            return str(raw).strip()
        # Tuple[float, ...]
        items = raw if isinstance(raw, (list, tuple)) else [p for p in str(raw).split(',') if p.strip()]
        return tuple(float(v) for v in items)
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"配置项 {section}.{key} 的值非法: {raw!r}", error_code="BAD_VALUE",
                                 details={"section": section, "key": key, "value": str(raw)}) from e


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ', '.join(repr(float(v)) for v in value)
    return str(value)


def apply_value(settings: Settings, section: str, key: str, raw: Any) -> None:
    """设置单个键，未知键抛 ConfigurationError"""
    target = settings.section(section)
    hints = get_type_hints(type(target))
    if key not in hints:
        raise ConfigurationError(f"未知配置键: {section}.{key}", error_code="UNKNOWN_KEY",
                                 details={"section": section, "key": key})
    setattr(target, key, _coerce(section, key, hints[key], raw))


def apply_mapping(settings: Settings, mapping: Dict[str, Dict[str, Any]]) -> None:
    for section, values in mapping.items():
        if not isinstance(values, dict):
            raise ConfigurationError(f"配置段 [{section}] 必须是键值表", error_code="BAD_SECTION")
        for key, raw in values.items():
            apply_value(settings, section, key, raw)


def parse_override(text: str) -> Tuple[str, str, str]:
    """解析 'section.key=value' 形式的命令行覆盖"""
    if '=' not in text or '.' not in text.split('=', 1)[0]:
        raise ConfigurationError(f"覆盖项格式应为 section.key=value: {text}", error_code="BAD_OVERRIDE")
    lhs, value = text.split('=', 1)
    section, key = lhs.strip().split('.', 1)
    return section, key, value


def load_settings(path: Optional[str] = None, overrides: Iterable[str] = ()) -> Settings:
    """
    加载有效配置。

    :param path: INI 或 JSON 配置文件（可选）
    :param overrides: section.key=value 覆盖列表
    :return: 校验后的 Settings
    """
    settings = Settings()
    if path:
        if not os.path.exists(path):
            raise ConfigurationError(f"配置文件不存在: {path}", error_code="CONFIG_NOT_FOUND",
                                     details={"path": path})
        if path.lower().endswith('.json'):
            with open(path, 'r', encoding='utf-8') as fh:
                try:
                    apply_mapping(settings, json.load(fh))
                except json.JSONDecodeError as e:
                    raise ConfigurationError(f"配置 JSON 格式错误: {e}", error_code="BAD_CONFIG") from e
        else:
            parser = configparser.ConfigParser(interpolation=None)
            try:
                parser.read(path, encoding='utf-8')
            except configparser.Error as e:
                raise ConfigurationError(f"配置 INI 格式错误: {e}", error_code="BAD_CONFIG") from e
            apply_mapping(settings, {s: dict(parser.items(s)) for s in parser.sections()})
        logger.info(f"已加载配置文件: {path}")
    for text in overrides:
        apply_value(settings, *parse_override(text))
    return settings.validate()


def settings_to_ini(settings: Settings) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for name in Settings.section_names():
        parser[name] = {k: _format(v) for k, v in asdict(getattr(settings, name)).items()}
    buffer = io.StringIO()
    parser.write(buffer)
    return buffer.getvalue()


def dump_settings(settings: Settings, path: str) -> None:
    """把有效配置写成 INI"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', encoding='utf-8') as fh:
        fh.write(settings_to_ini(settings))
