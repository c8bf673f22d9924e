"""Detection matching, precision/recall/F1 and average precision."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

from detkit.geometry import Box, box_iou_matrix
from detkit.postprocess import Detection, order_key


@dataclass(frozen=True)
class GroundTruth:
    box: Box
    label: Hashable = 0
    image_id: Hashable = 0


@dataclass(frozen=True)
class MatchResult:
    """Outcome of greedy matching.

    ``tp`` is aligned with the input detection list. ``frame_fn`` counts images
    holding at least one GT box but no detection at all.
    """

    tp: tuple[bool, ...]
    scores: tuple[float, ...]
    num_gt: int
    frame_fn: int = 0

    @property
    def true_positives(self) -> int:
        return sum(self.tp)

    @property
    def false_positives(self) -> int:
        return len(self.tp) - sum(self.tp)

    @property
    def false_negatives(self) -> int:
        return self.num_gt - sum(self.tp)


def match(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_threshold: float = 0.5) -> MatchResult:
    """Greedy matching in descending score order.

    A detection is a true positive when the unmatched same-label GT box of the
    same image with the highest IoU overlaps it strictly more than
    ``iou_threshold``. That GT box is then consumed.
    """
    gt_by_key: dict[tuple, list[int]] = {}
    for j, g in enumerate(gts):
        gt_by_key.setdefault((g.image_id, g.label), []).append(j)
    gt_boxes = np.array([g.box.as_tuple() for g in gts], dtype=float).reshape(-1, 4)
    used = np.zeros(len(gts), dtype=bool)
    tp = [False] * len(dets)

    for i in sorted(range(len(dets)), key=lambda k: order_key(dets[k], k)):
        d = dets[i]
        cand = gt_by_key.get((d.image_id, d.label))
        if not cand:
            continue
        cand = [j for j in cand if not used[j]]
        if not cand:
            continue
        ious = box_iou_matrix(np.array([d.box.as_tuple()]), gt_boxes[cand])[0]
        k = int(np.argmax(ious))
        if ious[k] > iou_threshold:
            tp[i] = True
            used[cand[k]] = True

    images_with_dets = {d.image_id for d in dets}
    frame_fn = len({g.image_id for g in gts} - images_with_dets)
    return MatchResult(tuple(tp), tuple(d.score for d in dets), len(gts), frame_fn)


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f1: float


def precision_recall_f1(m: MatchResult | None = None, *, tp: int = 0, fp: int = 0, fn: int = 0) -> Metrics:
    """Precision, recall and F1, each 0 when its denominator is 0.

    Counts come from ``m`` when given, otherwise from the keyword arguments.
    """
    if m is not None:
        tp, fp, fn = m.true_positives, m.false_positives, m.false_negatives
    prec = tp / (tp + fp) if tp + fp > 0 else 0.0
    rec = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
    return Metrics(prec, rec, f1)


@dataclass(frozen=True)
class PRCurve:
    thresholds: tuple[float, ...]
    recall: tuple[float, ...]
    precision: tuple[float, ...]
    ap: float

    def rows(self):
        return list(zip(self.thresholds, self.recall, self.precision))


def pr_curve(m: MatchResult) -> PRCurve:
    """Sweep a match result by descending score.

    Tied scores form a single threshold, so one PR point is emitted per
    distinct score. AP is the all-points area under the precision envelope
    (precision at recall r is the best precision at any recall >= r).
    """
    if m.num_gt == 0:
        raise ValueError("average precision is undefined without ground truth")
    scores = np.asarray(m.scores, dtype=float)
    tp = np.asarray(m.tp, dtype=float)
    order = np.argsort(-scores, kind="stable")
    scores, tp = scores[order], tp[order]
    if len(scores) == 0:
        return PRCurve((), (), (), 0.0)
    last = np.r_[scores[1:] != scores[:-1], True]
    tp_cum = np.cumsum(tp)[last]
    n_cum = (np.arange(len(scores)) + 1)[last]
    recall = tp_cum / m.num_gt
    precision = tp_cum / n_cum
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.r_[0.0, recall])
    ap = float(np.sum(steps * envelope))
    return PRCurve(tuple(scores[last].tolist()), tuple(recall.tolist()), tuple(precision.tolist()), ap)


def average_precision(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_threshold: float = 0.5) -> PRCurve:
    if len(gts) == 0:
        raise ValueError("average precision is undefined without ground truth")
    return pr_curve(match(dets, gts, iou_threshold))


def mean_average_precision(
    dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_threshold: float = 0.5
) -> tuple[float, dict]:
    """AP per GT label and their mean. Labels without GT are skipped."""
    labels = sorted({g.label for g in gts}, key=repr)
    per_label = {}
    for label in labels:
        d = [x for x in dets if x.label == label]
        g = [x for x in gts if x.label == label]
        per_label[label] = average_precision(d, g, iou_threshold).ap
    if not per_label:
        raise ValueError("mean average precision is undefined without ground truth")
    return float(np.mean(list(per_label.values()))), per_label
