"""Hard NMS and Soft-NMS (linear and Gaussian score decay)."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Hashable, Sequence

import numpy as np

from detkit.geometry import Box, box_iou_matrix


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    label: Hashable = 0
    image_id: Hashable = 0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score must lie in [0, 1], got {self.score}")


def order_key(det: Detection, index: int) -> tuple:
    """Sort key: score descending, then lower y1, lower x1, input index."""
    return (-det.score, det.box.y1, det.box.x1, index)


def _groups(dets: Sequence[Detection]) -> dict[tuple, list[int]]:
    groups: dict[tuple, list[int]] = {}
    for i, d in enumerate(dets):
        groups.setdefault((d.image_id, d.label), []).append(i)
    return groups


def _sorted(dets: list[Detection], indices: list[int]) -> list[Detection]:
    order = sorted(range(len(dets)), key=lambda k: order_key(dets[k], indices[k]))
    return [dets[k] for k in order]


def hard_nms(dets: Sequence[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy suppression of same-label, same-image boxes with IoU above threshold."""
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in [0, 1], got {iou_threshold}")
    kept, kept_idx = [], []
    for idx in _groups(dets).values():
        idx = sorted(idx, key=lambda i: order_key(dets[i], i))
        boxes = np.array([dets[i].box.as_tuple() for i in idx])
        ious = box_iou_matrix(boxes, boxes)
        alive = np.ones(len(idx), dtype=bool)
        for k in range(len(idx)):
            if not alive[k]:
                continue
            kept.append(dets[idx[k]])
            kept_idx.append(idx[k])
            alive[k + 1:] &= ious[k, k + 1:] <= iou_threshold
    return _sorted(kept, kept_idx)


def soft_nms(
    dets: Sequence[Detection],
    method: str = "linear",
    iou_threshold: float = 0.3,
    sigma: float = 0.5,
    score_floor: float = 0.001,
) -> list[Detection]:
    """Soft-NMS over each (image, label) group.

    The current best detection is kept, and every remaining detection in its
    group with overlap ``u`` gets its score decayed: by ``1 - u`` when
    ``u > iou_threshold`` (linear) or by ``exp(-u**2 / sigma)`` (gaussian).
    Detections whose score drops below ``score_floor`` are discarded.
    """
    if method not in ("linear", "gaussian"):
        raise ValueError(f"unknown soft-nms method {method!r}")
    if method == "gaussian" and not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in [0, 1], got {iou_threshold}")

    kept, kept_idx = [], []
    for idx in _groups(dets).values():
        boxes = np.array([dets[i].box.as_tuple() for i in idx])
        ious = box_iou_matrix(boxes, boxes)
        scores = np.array([dets[i].score for i in idx])
        y1 = boxes[:, 1]
        x1 = boxes[:, 0]
        pending = [k for k in range(len(idx)) if scores[k] >= score_floor]
        while pending:
            cur = min(pending, key=lambda k: (-scores[k], y1[k], x1[k], idx[k]))
            pending.remove(cur)
            kept.append(replace(dets[idx[cur]], score=float(scores[cur])))
            kept_idx.append(idx[cur])
            if not pending:
                break
            rest = np.array(pending)
            u = ious[cur, rest]
            if method == "linear":
                decay = np.where(u > iou_threshold, 1.0 - u, 1.0)
            else:
                decay = np.exp(-(u * u) / sigma)
            scores[rest] = scores[rest] * decay
            pending = [k for k in pending if scores[k] >= score_floor]
    return _sorted(kept, kept_idx)

