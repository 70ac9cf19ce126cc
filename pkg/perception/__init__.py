"""
车位感知包

提供统一的接口从 BEV 图像得到教师/学生结构场（角点场、边得分）。
内置可微解析检测器，并支持加载外部检测器导出的热力图。
"""

from .models import CornerField, Corner, EdgeScores, SlotAnnotation, DetectedSlot, SlotType
from .base import SlotPerception, ensure_student
from .analytic_detector import AnalyticPerception, analytic_corner_detector, analytic_corner_backward
from .external import ExternalPerception, load_external_field, save_external_field
from .postprocess import (corner_peaks, edge_scores, edge_scores_backward, annotations_to_teacher_field,
                          annotations_to_teacher_edges, infer_slots, marking_likelihood)
from .factory import PerceptionFactory

__all__ = [
    "CornerField",
    "Corner",
    "EdgeScores",
    "SlotAnnotation",
    "DetectedSlot",
    "SlotType",
    "SlotPerception",
    "ensure_student",
    "AnalyticPerception",
    "ExternalPerception",
    "PerceptionFactory",
    "analytic_corner_detector",
    "analytic_corner_backward",
    "load_external_field",
    "save_external_field",
    "corner_peaks",
    "edge_scores",
    "edge_scores_backward",
    "annotations_to_teacher_field",
    "annotations_to_teacher_edges",
    "infer_slots",
    "marking_likelihood",
]
