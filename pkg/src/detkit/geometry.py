"""Axis-aligned box arithmetic.

Boxes use continuous corner coordinates ``(x1, y1, x2, y2)`` with
``area = (x2 - x1) * (y2 - y1)`` (no +1 pixel convention).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True, order=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite, got {coords}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"box corners out of order: {coords}")

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "Box":
        return cls(x, y, x + w, y + h)

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "Box":
        return cls(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def shifted(self, dx: float, dy: float) -> "Box":
        return Box(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)


def area(b: Box) -> float:
    return (b.x2 - b.x1) * (b.y2 - b.y1)


def intersection(a: Box, b: Box) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes.

    Returns 0 when the union is empty (two degenerate boxes), so the
    function is total over valid boxes.
    """
    inter = intersection(a, b)
    union = area(a) + area(b) - inter
    if union <= 0:
        return 0.0
    return min(1.0, inter / union)


def center_aligned_iou(shape_a: Sequence[float], shape_b: Sequence[float]) -> float:
    """IoU of two ``(w, h)`` rectangles sharing a common center."""
    wa, ha = shape_a
    wb, hb = shape_b
    if wa <= 0 or ha <= 0 or wb <= 0 or hb <= 0:
        raise ValueError(f"shape dimensions must be positive, got {shape_a}, {shape_b}")
    inter = min(wa, wb) * min(ha, hb)
    return inter / (wa * ha + wb * hb - inter)


def shape_iou_matrix(shapes_a: np.ndarray, shapes_b: np.ndarray) -> np.ndarray:
    """Pairwise center-aligned IoU.

    Args:
        shapes_a: (N, 2) widths and heights.
        shapes_b: (M, 2) widths and heights.

    Returns:
        (N, M) IoU matrix.
    """
    shapes_a = np.asarray(shapes_a, dtype=float).reshape(-1, 2)
    shapes_b = np.asarray(shapes_b, dtype=float).reshape(-1, 2)
    wa, ha = shapes_a[:, 0:1], shapes_a[:, 1:2]
    wb, hb = shapes_b[:, 0], shapes_b[:, 1]
    inter = np.minimum(wa, wb) * np.minimum(ha, hb)
    return inter / (wa * ha + wb * hb - inter)


def box_iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) corner-form arrays."""
    boxes_a = np.asarray(boxes_a, dtype=float).reshape(-1, 4)
    boxes_b = np.asarray(boxes_b, dtype=float).reshape(-1, 4)
    area_a = (boxes_a[:, 2] - boxes_a[:, 0]) * (boxes_a[:, 3] - boxes_a[:, 1])
    area_b = (boxes_b[:, 2] - boxes_b[:, 0]) * (boxes_b[:, 3] - boxes_b[:, 1])
    w = np.minimum(boxes_a[:, None, 2], boxes_b[None, :, 2]) - np.maximum(boxes_a[:, None, 0], boxes_b[None, :, 0])
    h = np.minimum(boxes_a[:, None, 3], boxes_b[None, :, 3]) - np.maximum(boxes_a[:, None, 1], boxes_b[None, :, 1])
    inter = np.clip(w, 0, None) * np.clip(h, 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return np.minimum(out, 1.0)
