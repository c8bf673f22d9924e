"""Anchor optimization, Soft-NMS, detection metrics and verified conv/attention kernels."""

__version__ = "0.1.0"

from detkit.anchors import (
    AnchorConfig,
    CoverageReport,
    PyramidLevel,
    anchor_grid,
    anchor_shapes,
    coverage,
    paper_optimized,
    retinanet_default,
)
from detkit.evaluation import GroundTruth, MatchResult, PRCurve, average_precision, match, precision_recall_f1
from detkit.geometry import Box, area, center_aligned_iou, iou
from detkit.optimizer import DEParams, DEResult, de_optimize, optimize_anchors
from detkit.postprocess import Detection, hard_nms, soft_nms

__all__ = [
    "AnchorConfig",
    "Box",
    "CoverageReport",
    "DEParams",
    "DEResult",
    "Detection",
    "GroundTruth",
    "MatchResult",
    "PRCurve",
    "PyramidLevel",
    "anchor_grid",
    "anchor_shapes",
    "area",
    "average_precision",
    "center_aligned_iou",
    "coverage",
    "de_optimize",
    "hard_nms",
    "iou",
    "match",
    "optimize_anchors",
    "paper_optimized",
    "precision_recall_f1",
    "retinanet_default",
    "soft_nms",
]
