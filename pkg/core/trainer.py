"""
训练器

两阶段优化：
1. 光度阶段（iteration < phase1_iters）只优化 L_rgb；
2. 车位感知阶段加入 L_align、L_ipm、L_cam（按 slot_mode 选择消融变体）。

每步：渲染四路视图 → warp 到渲染 IPM → 学生检测器 → 权重 → 损失 → 伴随回传 → Adam。
"""

import json
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from common.exceptions import ConfigurationError, DatasetError, NonFiniteLossError
from common.settings import Settings
from core.camera import FisheyeCamera, Pose, default_rig
from core.ipm import IpmConfig, IpmGrid, build_grid, warp, warp_backward
from core.losses import (LossBreakdown, LossWeights, MatchCriteria, Phase, corner_precision_recall, feature_l2,
                         l_align, l_rgb, match_slots, psnr, ssim, total_loss, weighted_l1)
from core.renderer import RenderConfig, RenderedView, SceneGradients, rasterize_backward, render_views
from core.scene import PARAM_GROUPS, GaussianScene, PointSource, RandomBoxSource, init_scene
from core.slotweights import (SlotWeightConfig, SlotWeights, build_slot_weights, shape_weights,
                              shape_weights_backward, slot_weights_backward)
from core.storage import load_training_state, save_scene, save_training_state
from perception.base import SlotPerception, ensure_student
from perception.factory import PerceptionFactory
from perception.models import CornerField, EdgeScores, SlotAnnotation
from perception.postprocess import (annotations_to_teacher_edges, annotations_to_teacher_field, corner_peaks,
                                    infer_slots)

logger = logging.getLogger(__name__)

COMPONENTS = ('rgb', 'align', 'ipm', 'cam', 'feature')
GRAD_TOLERANCE = {'rgb': 1e-3, 'align': 5e-3, 'ipm': 1e-3, 'cam': 1e-3, 'feature': 5e-3}


@dataclass(frozen=True)
class TrainConfig:
    total_iters: int = 30000
    phase1_iters: int = 20000
    lr_position: float = 1.6e-4
    lr_position_final_ratio: float = 0.01
    lr_sh: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scales: float = 5e-3
    lr_rotation: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    seed: int = 0
    slot_mode: str = 'full'
    holdout_every: int = 10
    eval_every: int = 500
    log_every: int = 10
    checkpoint_every: int = 1000
    loss_weights: LossWeights = field(default_factory=LossWeights)
    slot_weights: SlotWeightConfig = field(default_factory=SlotWeightConfig)
    criteria: MatchCriteria = field(default_factory=MatchCriteria)

    def __post_init__(self):
        if self.phase1_iters > self.total_iters:
            raise ConfigurationError("phase1_iters 不能大于 total_iters", error_code="BAD_SCHEDULE")
        if min(self.lr_position, self.lr_sh, self.lr_opacity, self.lr_scales, self.lr_rotation) < 0:
            raise ConfigurationError("学习率不能为负", error_code="BAD_LR")

    @classmethod
    def from_settings(cls, settings) -> 'TrainConfig':
        t = settings.trainer
        return cls(total_iters=t.total_iters, phase1_iters=t.phase1_iters, lr_position=t.lr_position,
                   lr_position_final_ratio=t.lr_position_final_ratio, lr_sh=t.lr_sh, lr_opacity=t.lr_opacity,
                   lr_scales=t.lr_scales, lr_rotation=t.lr_rotation, beta1=t.adam_beta1, beta2=t.adam_beta2,
                   eps=t.adam_eps, seed=t.seed, slot_mode=t.slot_mode, holdout_every=t.holdout_every,
                   eval_every=t.eval_every, log_every=t.log_every, checkpoint_every=t.checkpoint_every,
                   loss_weights=LossWeights.from_settings(settings),
                   slot_weights=SlotWeightConfig.from_settings(settings),
                   criteria=MatchCriteria.from_settings(settings))

    def phase(self, iteration: int) -> Phase:
        return Phase.PHOTOMETRIC if iteration < self.phase1_iters else Phase.SLOT_AWARE

    def learning_rates(self, iteration: int) -> Dict[str, float]:
        return {'means': lr_position(iteration, self), 'quats': self.lr_rotation, 'log_scales': self.lr_scales,
                'logit_opacities': self.lr_opacity, 'sh_coeffs': self.lr_sh}

    def effective_slot_weights(self) -> SlotWeightConfig:
        """消融模式对混合系数的覆盖：teacher-only → α=β=1，student-only → α=β=0"""
        if self.slot_mode == 'teacher-only':
            return replace(self.slot_weights, alpha=1.0, beta=1.0)
        if self.slot_mode == 'student-only':
            return replace(self.slot_weights, alpha=0.0, beta=0.0)
        return self.slot_weights


def lr_position(iteration: int, config: TrainConfig) -> float:
    """lr₀ · ratio^(iter/total)，ratio 默认 0.01"""
    if config.total_iters <= 0:
        return config.lr_position
    frac = min(max(iteration, 0), config.total_iters) / config.total_iters
    return config.lr_position * config.lr_position_final_ratio ** frac


@dataclass
class AdamState:
    """每个参数组的一阶/二阶矩与步数"""
    step: int
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]

    @classmethod
    def zeros(cls, scene: GaussianScene) -> 'AdamState':
        params = scene.parameters()
        return cls(0, {k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})

    def to_dict(self) -> Dict[str, Any]:
        return {'step': self.step, 'm': self.m, 'v': self.v}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'AdamState':
        return cls(int(data['step']), dict(data['m']), dict(data['v']))


def adam_update(scene: GaussianScene, grads: SceneGradients, state: AdamState, config: TrainConfig,
                iteration: int) -> None:
    """带偏差校正的 Adam；非有限梯度置零；学习率为 0 的参数组保持逐位不变"""
    state.step += 1
    lrs = config.learning_rates(iteration)
    b1, b2 = config.beta1, config.beta2
    params = scene.parameters()
    for name in PARAM_GROUPS:
        g = getattr(grads, name)
        bad = ~np.isfinite(g)
        if bad.any():
            logger.warning(f"参数组 {name} 有 {int(bad.sum())} 个非有限梯度，已置零")
            g = np.where(bad, 0.0, g)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if lrs[name] == 0.0:
            continue
        m_hat = m / (1.0 - b1 ** state.step)
        v_hat = v / (1.0 - b2 ** state.step)
        params[name] -= lrs[name] * m_hat / (np.sqrt(v_hat) + config.eps)
    if lrs['quats'] != 0.0:
        scene.renormalize_quaternions()


# ==================== 批数据与上下文 ====================

@dataclass
class FrameBatch:
    """一帧的监督数据：GT 鱼眼、GT IPM、教师输出"""
    key: str
    rig_pose: Pose
    images: List[np.ndarray]
    gt_ipm: np.ndarray
    teacher_field: CornerField
    teacher_edges: EdgeScores
    annotations: List[SlotAnnotation] = field(default_factory=list)


@dataclass
class TrainingContext:
    """一次训练共享的只读对象"""
    cameras: List[FisheyeCamera]
    grid: IpmGrid
    render_config: RenderConfig
    student: SlotPerception
    teacher: Optional[SlotPerception]
    teacher_source: str
    config: TrainConfig

    @property
    def stride(self) -> int:
        return self.student.stride

    @classmethod
    def from_settings(cls, settings, cameras: Sequence[FisheyeCamera], grid: Optional[IpmGrid] = None
                      ) -> 'TrainingContext':
        config = TrainConfig.from_settings(settings)
        student = PerceptionFactory.from_settings(settings, 'analytic')
        ensure_student(student)
        source = settings.perception.teacher_source
        teacher = None
        if source == 'detector':
            teacher = PerceptionFactory.from_settings(settings)
        elif source == 'external':
            teacher = PerceptionFactory.from_settings(settings, 'external')
        grid = grid or build_grid(cameras, IpmConfig.from_settings(settings))
        return cls(list(cameras), grid, RenderConfig.from_settings(settings), student, teacher, source, config)


def make_batch(key: str, rig_pose: Pose, images: Sequence[np.ndarray], ctx: TrainingContext,
               annotations: Sequence[SlotAnnotation] = ()) -> FrameBatch:
    """构造一帧的监督：GT IPM = warp(GT 鱼眼)；教师在 GT IPM 上运行（或来自标注）"""
    images = [np.asarray(img, dtype=np.float64) for img in images]
    gt_ipm = warp(ctx.grid, images)
    if ctx.teacher_source == 'annotations':
        shape = (ctx.grid.config.shape[0] // ctx.stride, ctx.grid.config.shape[1] // ctx.stride)
        field_t = annotations_to_teacher_field(annotations, shape, ctx.stride)
        edges_t = annotations_to_teacher_edges(annotations)
    else:
        field_t, _, edges_t = ctx.teacher.perceive(gt_ipm, key)
    return FrameBatch(key, rig_pose, images, gt_ipm, field_t, edges_t, list(annotations))


# ==================== 目标函数与伴随 ====================

@dataclass
class Objective:
    """一次前向 + 反向的结果"""
    breakdown: LossBreakdown
    gradients: SceneGradients
    views: List[RenderedView]
    rendered_ipm: Optional[np.ndarray] = None
    weights: Optional[SlotWeights] = None


def _component_scale(select: Optional[str], name: str, weights: LossWeights, phase: Phase) -> float:
    """select 为 None 时按总损失加权，否则只取单个原始分量"""
    if select is not None:
        return 1.0 if select == name else 0.0
    if name == 'rgb':
        return 1.0
    if phase is Phase.PHOTOMETRIC:
        return 0.0
    return {'align': weights.lambda_align, 'ipm': weights.lambda_ipm, 'cam': weights.lambda_cam,
            'feature': weights.lambda_feature}[name]


def compute_objective(scene: GaussianScene, batch: FrameBatch, ctx: TrainingContext, phase: Phase,
                      select: Optional[str] = None, frozen_weights: Optional[SlotWeights] = None) -> Objective:
    """
    计算损失分量及其对全部高斯参数的梯度。

    :param select: 只回传某一原始分量的梯度（梯度检查用）；None 表示总损失
    :param frozen_weights: 固定权重图（有限差分时复用基点的权重，与 stop-gradient 语义一致）
    """
    cfg = ctx.config
    lw = cfg.loss_weights
    views = render_views(scene, ctx.cameras, ctx.render_config, batch.rig_pose)
    n_cam = len(views)
    view_grads = [np.zeros_like(v.rgb) for v in views]
    out = LossBreakdown(phase=phase)

    for c, view in enumerate(views):
        value, grad = l_rgb(view.rgb, batch.images[c], lw.lambda_dssim)
        out.rgb += value / n_cam
        view_grads[c] += _component_scale(select, 'rgb', lw, phase) * grad / n_cam

    rendered_ipm, weights = None, None
    slot_active = phase is Phase.SLOT_AWARE and cfg.slot_mode != 'off'
    if slot_active or (select is not None and select != 'rgb'):
        rendered_ipm = warp(ctx.grid, [v.rgb for v in views])
        g_ipm = np.zeros_like(rendered_ipm)
        if cfg.slot_mode == 'direct-ipm-l1':
            res = weighted_l1(rendered_ipm, batch.gt_ipm, np.ones(ctx.grid.config.shape))
            out.ipm = res.value
            g_ipm += _component_scale(select, 'ipm', lw, phase) * res.grad_pred
        else:
            field_s = ctx.student.detect_corners(rendered_ipm, batch.key)
            if cfg.slot_mode == 'feature-only':
                out.feature, g_conf = feature_l2(field_s.confidence, batch.teacher_field.confidence)
                g_conf = _component_scale(select, 'feature', lw, phase) * g_conf
            else:
                weights, g_conf = _slot_aware_terms(field_s, rendered_ipm, views, batch, ctx, phase, select,
                                                    frozen_weights, out, view_grads, g_ipm)
            if np.any(g_conf):
                g_ipm += ctx.student.corners_backward(field_s, g_conf)
        if np.any(g_ipm):
            for c, g in enumerate(warp_backward(ctx.grid, g_ipm)):
                view_grads[c] += g

    out.total = total_loss(out.components(), lw, phase)
    bad = out.non_finite()
    if bad is not None:
        raise NonFiniteLossError(f"损失分量 {bad} 非有限", component=bad)

    grads = SceneGradients.zeros_like(scene)
    for view, g in zip(views, view_grads):
        if np.any(g):
            grads.add_(rasterize_backward(view, g))
    return Objective(out, grads, views, rendered_ipm, weights)


def _slot_aware_terms(field_s: CornerField, rendered_ipm: np.ndarray, views: List[RenderedView],
                      batch: FrameBatch, ctx: TrainingContext, phase: Phase, select: Optional[str],
                      frozen_weights: Optional[SlotWeights], out: LossBreakdown,
                      view_grads: List[np.ndarray], g_ipm: np.ndarray) -> Tuple[SlotWeights, np.ndarray]:
    """L_align、L_ipm、L_cam；就地累加视图与 IPM 梯度，返回 (权重, 学生置信度梯度)"""
    cfg = ctx.config
    lw = cfg.loss_weights
    sw = cfg.effective_slot_weights()
    stride = ctx.stride
    if frozen_weights is not None:
        weights = frozen_weights
    else:
        corners_s = corner_peaks(field_s, ctx.student.confidence_threshold, ctx.student.nms_radius)
        edges_s = ctx.student.score_edges(corners_s, rendered_ipm, batch.key)
        weights = build_slot_weights(batch.teacher_field.confidence, field_s.confidence,
                                     batch.teacher_edges.positions(), batch.teacher_edges.scores,
                                     edges_s.positions(), edges_s.scores, ctx.grid, stride, sw)

    w_s = shape_weights(field_s.confidence, sw.tau, sw.temperature, sw.gamma).values
    out.align, g_ws = l_align(w_s, weights.teacher.values, lw.topk_k, lw.kl_direction)
    g_conf = _component_scale(select, 'align', lw, phase) * shape_weights_backward(
        field_s.confidence, g_ws, sw.tau, sw.temperature, sw.gamma)

    s_ipm = _component_scale(select, 'ipm', lw, phase)
    res = weighted_l1(rendered_ipm, batch.gt_ipm, weights.combined.values)
    out.ipm = res.value
    g_ipm += s_ipm * res.grad_pred

    s_cam = _component_scale(select, 'cam', lw, phase)
    n_cam = len(views)
    cam_w_grads = []
    for c, view in enumerate(views):
        r = weighted_l1(view.rgb, batch.images[c], weights.camera[c])
        out.cam += r.value / n_cam
        view_grads[c] += s_cam * r.grad_pred / n_cam
        cam_w_grads.append(s_cam * r.grad_weights / n_cam)

    if not sw.stop_gradient and frozen_weights is None:
        g_conf = g_conf + slot_weights_backward(weights, s_ipm * res.grad_weights, cam_w_grads, ctx.grid,
                                                stride, sw)
    return weights, g_conf


def train_step(scene: GaussianScene, batch: FrameBatch, ctx: TrainingContext, adam: AdamState,
               iteration: int) -> LossBreakdown:
    """一步优化：前向、伴随、Adam 更新（原地修改 scene）"""
    phase = ctx.config.phase(iteration)
    objective = compute_objective(scene, batch, ctx, phase)
    adam_update(scene, objective.gradients, adam, ctx.config, iteration)
    scene.iteration = iteration + 1
    return objective.breakdown


# ==================== 评估 ====================

def evaluate_frame(scene: GaussianScene, batch: FrameBatch, ctx: TrainingContext) -> Dict[str, Any]:
    """单帧评估：鱼眼 PSNR/SSIM（四路平均）+ 渲染 IPM 上的车位/角点精度召回"""
    views = render_views(scene, ctx.cameras, ctx.render_config, batch.rig_pose)
    images = [np.clip(v.rgb, 0.0, 1.0) for v in views]
    frame_psnr = float(np.mean([psnr(img, gt) for img, gt in zip(images, batch.images)]))
    frame_ssim = float(np.mean([ssim(img, gt) for img, gt in zip(images, batch.images)]))
    rendered_ipm = warp(ctx.grid, images)
    _, corners, edges = ctx.student.perceive(rendered_ipm, batch.key)
    slots = infer_slots(edges, rendered_ipm, ctx.grid.config.px_per_m)
    match = match_slots(slots, batch.annotations, ctx.config.criteria)
    gt_points = _unique_points(batch.annotations)
    cp, cr = corner_precision_recall(np.array([c.position for c in corners]).reshape(-1, 2), gt_points,
                                     ctx.config.criteria.distance,
                                     np.array([c.confidence for c in corners]))
    return {'frame': batch.key, 'psnr': frame_psnr, 'ssim': frame_ssim, 'precision': match.precision,
            'recall': match.recall, 'corner_precision': cp, 'corner_recall': cr, 'detections': len(slots),
            'ground_truth': len(batch.annotations)}


def _unique_points(annotations: Sequence[SlotAnnotation], merge_px: float = 1.0) -> np.ndarray:
    points: List[np.ndarray] = []
    for ann in annotations:
        for p in (np.asarray(ann.p1), np.asarray(ann.p2)):
            if not any(np.linalg.norm(p - q) <= merge_px for q in points):
                points.append(p)
    return np.array(points).reshape(-1, 2)


def summarize(per_frame: List[Dict[str, Any]]) -> Dict[str, Any]:
    keys = ('psnr', 'ssim', 'precision', 'recall', 'corner_precision', 'corner_recall')
    summary = {k: float(np.mean([f[k] for f in per_frame])) if per_frame else 0.0 for k in keys}
    summary['per_frame'] = per_frame
    return summary


# ==================== 训练循环 ====================

@dataclass
class TrainingResult:
    scene: GaussianScene
    metrics: List[Dict[str, Any]]
    evaluation: Dict[str, Any]


def _point_source(dataset):
    if dataset.layout is not None:
        from services.synthdata import ParkingLayout
        return ParkingLayout.from_dict(dataset.layout)
    xs = [f.x for f in dataset.frames]
    ys = [f.y for f in dataset.frames]
    return RandomBoxSource((min(xs) - 8.0, min(ys) - 8.0, 0.0), (max(xs) + 8.0, max(ys) + 8.0, 0.5))


def _check_dataset(dataset, cameras: Sequence[FisheyeCamera]) -> None:
    if not dataset.train_frames:
        raise DatasetError("数据集没有训练帧", error_code="NO_TRAIN_FRAMES")
    names = [c.name for c in cameras]
    for frame in dataset.frames[:1]:
        missing = [n for n in names if n not in frame.image_paths]
        if missing:
            raise DatasetError(f"标定中的相机 {missing} 在数据集中没有图像", error_code="CALIB_MISMATCH")


class MetricsWriter:
    """把训练指标按 JSON 行写入 metrics.jsonl"""

    def __init__(self, path: Optional[str], append: bool = False):
        self.path = path
        self.records: List[Dict[str, Any]] = []
        if path:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            if not append:
                open(path, 'w', encoding='utf-8').close()

    def write(self, record: Dict[str, Any]) -> None:
        self.records.append(record)
        if self.path:
            with open(self.path, 'a', encoding='utf-8') as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def run_training(settings, dataset, out_dir: Optional[str] = None, resume: Optional[str] = None) -> TrainingResult:
    """
    完整训练流程。

    帧按每个 epoch 的种子洗牌循环；每 eval_every 步在留出帧上评估；
    每 checkpoint_every 步写 PGSC 场景与 npz 训练状态。相同种子与线程数下逐位确定。

    :param settings: common.settings.Settings
    :param dataset: services.dataset.Dataset
    :param out_dir: 输出目录（None 时不写文件）
    :param resume: 从 npz 训练状态继续
    """
    ctx = TrainingContext.from_settings(settings, dataset.cameras)
    cfg = ctx.config
    _check_dataset(dataset, ctx.cameras)

    extra: Dict[str, Any] = {}
    if resume:
        scene, adam_dict, rng_state, extra = load_training_state(resume)
        adam = AdamState.from_dict(adam_dict)
        rng = np.random.default_rng()
        rng.bit_generator.state = rng_state
        logger.info(f"从 {resume} 恢复训练，迭代 {scene.iteration}")
    else:
        s = settings.scene
        scene = init_scene(_point_source(dataset), s.count, s.sh_degree, cfg.seed, s.init_opacity, s.knn)
        adam = AdamState.zeros(scene)
        rng = np.random.default_rng(cfg.seed)

    metrics_path = os.path.join(out_dir, 'metrics.jsonl') if out_dir else None
    writer = MetricsWriter(metrics_path, append=bool(resume))
    cache: Dict[str, FrameBatch] = {}

    def batch_for(frame) -> FrameBatch:
        if frame.key not in cache:
            cache[frame.key] = make_batch(frame.key, frame.pose, frame.images(ctx.cameras), ctx, frame.annotations)
        return cache[frame.key]

    def evaluate(iteration: int) -> Dict[str, Any]:
        frames = dataset.eval_frames or dataset.train_frames[:1]
        summary = summarize([evaluate_frame(scene, batch_for(f), ctx) for f in frames])
        writer.write({'type': 'eval', 'iteration': iteration,
                      **{k: v for k, v in summary.items() if k != 'per_frame'}})
        logger.info(f"[{iteration}] 评估: PSNR {summary['psnr']:.2f} dB, SSIM {summary['ssim']:.4f}, "
                    f"P {summary['precision']:.3f}, R {summary['recall']:.3f}")
        return summary

    def checkpoint(iteration: int, final: bool = False) -> None:
        if not out_dir:
            return
        prefix = os.path.join(out_dir, 'checkpoints', f"{iteration:06d}") if not final else out_dir
        os.makedirs(prefix, exist_ok=True)
        save_scene(scene, os.path.join(prefix, 'scene.pgsc'))
        save_training_state(os.path.join(prefix, 'state.npz'), scene, adam.to_dict(),
                            rng.bit_generator.state, {'order': order, 'cursor': cursor})

    train = dataset.train_frames
    order: List[int] = list(extra.get('order', []))
    cursor: int = int(extra.get('cursor', 0))
    start = scene.iteration
    logger.info(f"开始训练: {len(train)} 训练帧, 迭代 {start} → {cfg.total_iters} "
                f"(光度阶段 {cfg.phase1_iters}), 模式 {cfg.slot_mode}")

    evaluation = evaluate(start) if start == 0 else {}
    for iteration in range(start, cfg.total_iters):
        if cursor >= len(order):
            order = [int(i) for i in rng.permutation(len(train))]
            cursor = 0
        frame = train[order[cursor]]
        cursor += 1
        breakdown = train_step(scene, batch_for(frame), ctx, adam, iteration)
        done = iteration + 1
        if done % cfg.log_every == 0 or done == cfg.total_iters:
            writer.write({'type': 'train', 'iteration': done, 'frame': frame.key,
                          'lr_position': lr_position(iteration, cfg), **breakdown.to_dict()})
            logger.info(f"[{done}] {breakdown.phase.value} 总损失 {breakdown.total:.6f} "
                        f"(rgb {breakdown.rgb:.5f}, align {breakdown.align:.5f}, "
                        f"ipm {breakdown.ipm:.5f}, cam {breakdown.cam:.5f})")
        if cfg.eval_every > 0 and done % cfg.eval_every == 0 and done != cfg.total_iters:
            evaluate(done)
        if cfg.checkpoint_every > 0 and done % cfg.checkpoint_every == 0:
            checkpoint(done)

    if scene.iteration != start or not evaluation:
        evaluation = evaluate(scene.iteration)
    checkpoint(scene.iteration, final=True)
    return TrainingResult(scene, writer.records, evaluation)


# ==================== 梯度检查 ====================

def make_gradcheck_problem(seed: int = 7, count: int = 30, size: Tuple[int, int] = (64, 48),
                           slot_mode: str = 'full') -> Tuple[GaussianScene, FrameBatch, TrainingContext]:
    """
    小规模梯度检查问题：四路 64×48 鱼眼、64×64 IPM、count 个地面附近的高斯；
    GT 由扰动后的场景渲染，教师在 GT IPM 上运行解析检测器。
    """
    rng = np.random.default_rng(seed)
    settings = Settings()
    settings.ipm.px_per_m = 8.0
    settings.ipm.bev_width = 64
    settings.ipm.bev_height = 64
    settings.losses.topk_k = 64
    settings.renderer.background = (0.1, 0.1, 0.1)
    settings.trainer.slot_mode = slot_mode
    settings.runtime.threads = 1
    cameras = default_rig(*size)
    ctx = TrainingContext.from_settings(settings, cameras)

    pts = np.column_stack([rng.uniform(-3.5, 3.5, count), rng.uniform(-3.5, 3.5, count),
                           rng.uniform(0.0, 0.3, count)])
    colors = rng.uniform(0.1, 0.9, (count, 3))
    scene = init_scene(PointSource(pts, colors), count, sh_degree=1, seed=seed, init_opacity=0.6)
    scene.log_scales[:] = np.log(rng.uniform(0.25, 0.5, (count, 3)))
    q = rng.normal(size=(count, 4))
    scene.quats[:] = q / np.linalg.norm(q, axis=1, keepdims=True)
    scene.sh_coeffs[:, 1:, :] = rng.normal(scale=0.1, size=scene.sh_coeffs[:, 1:, :].shape)

    target = scene.copy()
    target.means += rng.normal(scale=0.05, size=target.means.shape)
    target.sh_coeffs[:, 0, :] += rng.normal(scale=0.3, size=(count, 3))
    rig_pose = Pose.identity()
    images = [v.rgb for v in render_views(target, cameras, ctx.render_config, rig_pose)]
    batch = make_batch('gradcheck', rig_pose, images, ctx)
    return scene, batch, ctx


def _probe_indices(analytic: np.ndarray, rng: np.random.Generator, probes: int) -> np.ndarray:
    flat = np.abs(analytic.reshape(-1))
    top = np.argsort(-flat, kind='stable')[:probes // 2]
    rest = rng.choice(flat.size, size=min(probes - top.size, flat.size), replace=False)
    return np.unique(np.concatenate([top, rest]))


def grad_check(scene: GaussianScene, batch: FrameBatch, ctx: TrainingContext,
               components: Sequence[str] = ('rgb', 'align', 'ipm', 'cam'), groups: Sequence[str] = PARAM_GROUPS,
               probes: int = 6, h: float = 1e-4, seed: int = 0) -> Dict[str, Any]:
    """
    中心差分对比解析梯度。

    ipm/cam 分量在基点冻结权重图（stop-gradient 语义）；相对误差
    |a − f| / max(|a|, |f|, 1e-7)。返回 {'rows': [...], 'worst': {...}, 'passed': bool, 'sg_contract': bool}
    """
    rng = np.random.default_rng(seed)
    phase = Phase.SLOT_AWARE
    rows = []
    for comp in components:
        base = compute_objective(scene, batch, ctx, phase, select=comp)
        frozen = base.weights if comp in ('ipm', 'cam') else None
        for group in groups:
            analytic = getattr(base.gradients, group)
            param = scene.parameters()[group]
            worst = 0.0
            for idx in _probe_indices(analytic, rng, probes):
                pos = np.unravel_index(idx, param.shape)
                orig = param[pos]
                param[pos] = orig + h
                f_plus = getattr(compute_objective(scene, batch, ctx, phase, comp, frozen).breakdown, comp)
                param[pos] = orig - h
                f_minus = getattr(compute_objective(scene, batch, ctx, phase, comp, frozen).breakdown, comp)
                param[pos] = orig
                fd = (f_plus - f_minus) / (2.0 * h)
                a = float(analytic[pos])
                worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-7))
            rows.append({'component': comp, 'group': group, 'max_rel_error': worst,
                         'tolerance': GRAD_TOLERANCE[comp], 'passed': worst < GRAD_TOLERANCE[comp]})
            logger.debug(f"梯度检查 {comp}/{group}: 最大相对误差 {worst:.3e}")

    sg_contract = True
    sw = ctx.config.effective_slot_weights()
    if sw.stop_gradient and rows:
        probe = compute_objective(scene, batch, ctx, phase, select='ipm')
        if probe.weights is not None:
            g = slot_weights_backward(probe.weights, np.ones(ctx.grid.config.shape), None, ctx.grid,
                                      ctx.stride, sw)
            sg_contract = not np.any(g)
    worst_row = max(rows, key=lambda r: r['max_rel_error'] / r['tolerance']) if rows else None
    return {'rows': rows, 'worst': worst_row, 'sg_contract': sg_contract,
            'passed': all(r['passed'] for r in rows) and sg_contract}
