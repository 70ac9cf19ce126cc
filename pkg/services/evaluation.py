"""
评估报告

- evaluate_directories: 预测图像目录 vs GT 图像目录（按相对路径配对）的 PSNR/SSIM，
  可选车位检测 JSON 的精度/召回；
- evaluate_scene: 训练好的场景在数据集留出帧上的完整评估；
- write_report: JSON 报告 + pandas CSV 逐帧表格。
"""

import logging
import os
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from common.exceptions import DatasetError
from common.utilities import read_image, read_json, write_json
from core.losses import MatchCriteria, match_slots, psnr, ssim
from core.scene import GaussianScene
from core.trainer import TrainingContext, evaluate_frame, make_batch, summarize
from perception.models import DetectedSlot, SlotAnnotation

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = ('.png',)


def _list_images(root: str) -> List[str]:
    found = []
    for dirpath, _, filenames in os.walk(root):
        for name in filenames:
            if name.lower().endswith(IMAGE_EXTENSIONS):
                found.append(os.path.relpath(os.path.join(dirpath, name), root))
    return sorted(found)


def _load_detections(path: str) -> Dict[str, List[DetectedSlot]]:
    data = read_json(path)
    out = {}
    for frame, entries in data.get('frames', {}).items():
        out[str(frame)] = [DetectedSlot(tuple(e['p1']), tuple(e['p2']), float(e['angle_deg']),
                                        float(e.get('confidence', 1.0))) for e in entries]
    return out


def evaluate_directories(pred_dir: str, gt_dir: str, detections: Optional[str] = None,
                         criteria: MatchCriteria = MatchCriteria()) -> Dict[str, Any]:
    """
    逐图像比较两个目录（以预测目录中的相对路径为准）。

    :param detections: 车位检测 JSON {"frames": {帧号: [{p1, p2, angle_deg, confidence}]}}，
                       与 gt_dir/slots.json 的逐帧标注匹配
    :raises DatasetError: 预测目录为空或 GT 缺少对应图像
    """
    pred_images = _list_images(pred_dir)
    if not pred_images:
        raise DatasetError(f"预测目录中没有图像: {pred_dir}", error_code="EMPTY_PREDICTION",
                           details={"path": pred_dir})
    per_frame = []
    for rel in pred_images:
        gt_path = os.path.join(gt_dir, rel)
        if not os.path.exists(gt_path):
            raise DatasetError(f"GT 缺少对应图像: {gt_path}", error_code="MISSING_GT", details={"path": gt_path})
        a, b = read_image(os.path.join(pred_dir, rel)), read_image(gt_path)
        per_frame.append({'frame': rel, 'psnr': psnr(a, b), 'ssim': ssim(a, b)})

    report: Dict[str, Any] = {
        'psnr': float(np.mean([f['psnr'] for f in per_frame])),
        'ssim': float(np.mean([f['ssim'] for f in per_frame])),
        'precision': None, 'recall': None, 'per_frame': per_frame,
    }
    if detections:
        truth = read_json(os.path.join(gt_dir, 'slots.json')).get('frames', {})
        dets = _load_detections(detections)
        tp = fp = fn = 0
        for frame, anns in truth.items():
            result = match_slots(dets.get(frame, []), [SlotAnnotation.from_dict(a) for a in anns], criteria)
            tp, fp, fn = tp + result.true_positives, fp + result.false_positives, fn + result.false_negatives
        report['precision'] = tp / (tp + fp) if tp + fp else (1.0 if fn == 0 else 0.0)
        report['recall'] = tp / (tp + fn) if tp + fn else 1.0
    return report


def evaluate_scene(scene: GaussianScene, dataset, settings) -> Dict[str, Any]:
    """在留出帧上评估场景：鱼眼 PSNR/SSIM 与渲染 IPM 上的车位、角点精度召回"""
    ctx = TrainingContext.from_settings(settings, dataset.cameras)
    frames = dataset.eval_frames or dataset.frames
    per_frame = []
    for frame in frames:
        batch = make_batch(frame.key, frame.pose, frame.images(ctx.cameras), ctx, frame.annotations)
        per_frame.append(evaluate_frame(scene, batch, ctx))
    logger.info(f"评估完成: {len(per_frame)} 帧")
    return summarize(per_frame)


def write_report(report: Dict[str, Any], out_dir: str, name: str = 'report') -> Dict[str, str]:
    """写 JSON 报告与逐帧 CSV，返回两个文件路径"""
    os.makedirs(out_dir, exist_ok=True)
    json_path = os.path.join(out_dir, f'{name}.json')
    csv_path = os.path.join(out_dir, f'{name}.csv')
    write_json(json_path, report)
    df = pd.DataFrame(report.get('per_frame', []))
    if not df.empty:
        summary = {col: df[col].mean() for col in df.columns if pd.api.types.is_numeric_dtype(df[col])}
        summary['frame'] = 'mean'
        df = pd.concat([df, pd.DataFrame([summary])], ignore_index=True)
    df.to_csv(csv_path, index=False, float_format='%.6f')
    logger.info(f"评估报告已写入: {json_path}, {csv_path}")
    return {'json': json_path, 'csv': csv_path}
