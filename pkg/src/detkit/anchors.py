"""Anchor shapes, dense anchor grids and corpus coverage scoring."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from detkit.geometry import Box, box_iou_matrix, shape_iou_matrix

DEFAULT_STRIDES = (8, 16, 32, 64, 128)
LEVEL_NAMES = ("P3", "P4", "P5", "P6", "P7")
DEFAULT_OCTAVES = (2.0 ** 0, 2.0 ** (1 / 3), 2.0 ** (2 / 3))


@dataclass(frozen=True)
class PyramidLevel:
    name: str
    stride: float
    base_size: float

    def __post_init__(self):
        if not (self.stride > 0 and self.base_size > 0):
            raise ValueError(f"level {self.name}: stride and base_size must be positive")


@dataclass(frozen=True)
class AnchorConfig:
    levels: tuple[PyramidLevel, ...]
    octave_scales: tuple[float, ...]
    ratios: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        object.__setattr__(self, "octave_scales", tuple(float(o) for o in self.octave_scales))
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if not self.levels:
            raise ValueError("config needs at least one pyramid level")
        if not self.octave_scales or not self.ratios:
            raise ValueError("config needs at least one octave scale and one ratio")
        if any(o <= 0 for o in self.octave_scales) or any(r <= 0 for r in self.ratios):
            raise ValueError("octave scales and ratios must be strictly positive")
        strides = [lv.stride for lv in self.levels]
        if any(b <= a for a, b in zip(strides, strides[1:])):
            raise ValueError(f"level strides must be strictly increasing, got {strides}")

    @property
    def anchors_per_location(self) -> int:
        return len(self.octave_scales) * len(self.ratios)

    def with_sizes(self, sizes: Sequence[float]) -> "AnchorConfig":
        if len(sizes) != len(self.levels):
            raise ValueError(f"expected {len(self.levels)} sizes, got {len(sizes)}")
        levels = tuple(PyramidLevel(lv.name, lv.stride, float(s)) for lv, s in zip(self.levels, sizes))
        return AnchorConfig(levels, self.octave_scales, self.ratios)

    def with_ratios(self, ratios: Sequence[float]) -> "AnchorConfig":
        return AnchorConfig(self.levels, self.octave_scales, tuple(ratios))

    def to_dict(self) -> dict:
        return {
            "levels": [{"name": lv.name, "stride": lv.stride, "base_size": lv.base_size} for lv in self.levels],
            "octave_scales": list(self.octave_scales),
            "ratios": list(self.ratios),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AnchorConfig":
        try:
            levels = tuple(
                PyramidLevel(str(lv["name"]), float(lv["stride"]), float(lv["base_size"])) for lv in data["levels"]
            )
            return cls(levels, tuple(data["octave_scales"]), tuple(data["ratios"]))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed anchor config: {exc!r}") from exc


def _make_config(sizes, ratios, octaves=DEFAULT_OCTAVES, strides=DEFAULT_STRIDES) -> AnchorConfig:
    levels = tuple(PyramidLevel(n, float(s), float(b)) for n, s, b in zip(LEVEL_NAMES, strides, sizes))
    return AnchorConfig(levels, tuple(octaves), tuple(ratios))


def retinanet_default() -> AnchorConfig:
    """Sizes 32..512 over P3-P7, three octaves, ratios 1:2, 1:1, 2:1."""
    return _make_config((32, 64, 128, 256, 512), (0.5, 1.0, 2.0))


def paper_optimized() -> AnchorConfig:
    """Published optimized configuration: five ratios per level."""
    return _make_config((16, 32, 64, 64, 64), (0.481, 0.741, 1.0, 1.349, 2.078))


PRESETS = {
    "retinanet-default": retinanet_default,
    "paper-optimized": paper_optimized,
}


def load_config(path_or_preset: str | Path) -> AnchorConfig:
    """Load a config from a JSON file, or by preset name."""
    key = str(path_or_preset)
    if key in PRESETS:
        return PRESETS[key]()
    with open(path_or_preset, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path_or_preset}: invalid JSON ({exc})") from exc
    return AnchorConfig.from_dict(data)


def config_to_json(cfg: AnchorConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2) + "\n"


def anchor_shapes(cfg: AnchorConfig, level_index: int) -> list[tuple[float, float]]:
    """Anchor ``(w, h)`` pairs of one pyramid level.

    Ratio is width/height and the split preserves area: an octave ``o`` and
    ratio ``r`` give ``w = s*o*sqrt(r)``, ``h = s*o/sqrt(r)``.
    """
    if not 0 <= level_index < len(cfg.levels):
        raise IndexError(f"level_index {level_index} out of range for {len(cfg.levels)} levels")
    base = cfg.levels[level_index].base_size
    shapes = []
    for o in cfg.octave_scales:
        s = base * o
        for r in cfg.ratios:
            q = math.sqrt(r)
            shapes.append((s * q, s / q))
    return shapes


def all_shapes(cfg: AnchorConfig) -> np.ndarray:
    """(L * A, 2) array of every level's anchor shapes."""
    return np.array([s for i in range(len(cfg.levels)) for s in anchor_shapes(cfg, i)], dtype=float)


def anchor_grid(cfg: AnchorConfig, level_index: int, image_w: float, image_h: float) -> list[Box]:
    """Tile a level's anchor shapes over an image, unclipped.

    Cell centers sit at ``((i + 0.5) * stride, (j + 0.5) * stride)``. Boxes are
    ordered row by row (j outer, i inner), shapes innermost.
    """
    arr = anchor_grid_array(cfg, level_index, image_w, image_h)
    return [Box(*row) for row in arr.tolist()]


def anchor_grid_array(cfg: AnchorConfig, level_index: int, image_w: float, image_h: float) -> np.ndarray:
    if image_w <= 0 or image_h <= 0:
        raise ValueError(f"image dimensions must be positive, got {image_w}x{image_h}")
    shapes = np.array(anchor_shapes(cfg, level_index))
    stride = cfg.levels[level_index].stride
    nx = math.ceil(image_w / stride)
    ny = math.ceil(image_h / stride)
    cx = (np.arange(nx) + 0.5) * stride
    cy = (np.arange(ny) + 0.5) * stride
    gy, gx = np.meshgrid(cy, cx, indexing="ij")
    centers = np.stack([gx.ravel(), gy.ravel()], axis=1)
    half = shapes / 2
    x1 = centers[:, None, 0] - half[None, :, 0]
    y1 = centers[:, None, 1] - half[None, :, 1]
    x2 = centers[:, None, 0] + half[None, :, 0]
    y2 = centers[:, None, 1] + half[None, :, 1]
    return np.stack([x1, y1, x2, y2], axis=-1).reshape(-1, 4)


@dataclass(frozen=True)
class CoverageReport:
    mean_best_iou: float
    min_best_iou: float
    fraction_above_half: float
    count: int
    best_ious: tuple[float, ...] = field(repr=False, compare=False, default=())

    def to_dict(self) -> dict:
        return {
            "mean_best_iou": self.mean_best_iou,
            "min_best_iou": self.min_best_iou,
            "fraction_above_half": self.fraction_above_half,
            "count": self.count,
        }


def _gt_shapes(gt: Iterable) -> np.ndarray:
    return np.array([(g.box.width, g.box.height) for g in gt], dtype=float).reshape(-1, 2)


def best_shape_ious(shapes: np.ndarray, gt_shapes: np.ndarray, threads: int = 1) -> np.ndarray:
    """Best center-aligned IoU of each GT shape against any anchor shape."""
    if threads <= 1 or len(gt_shapes) < 2 * threads:
        return shape_iou_matrix(gt_shapes, shapes).max(axis=1)
    chunks = np.array_split(gt_shapes, threads)
    with ThreadPoolExecutor(threads) as pool:
        parts = list(pool.map(lambda c: shape_iou_matrix(c, shapes).max(axis=1), chunks))
    return np.concatenate(parts)


def _best_grid_ious(cfg: AnchorConfig, gt: Sequence, image_size: tuple[float, float]) -> np.ndarray:
    w, h = image_size
    anchors = np.concatenate([anchor_grid_array(cfg, i, w, h) for i in range(len(cfg.levels))])
    boxes = np.array([g.box.as_tuple() for g in gt], dtype=float)
    best = np.empty(len(boxes))
    for start in range(0, len(boxes), 256):
        best[start:start + 256] = box_iou_matrix(boxes[start:start + 256], anchors).max(axis=1)
    return best


def coverage(
    cfg: AnchorConfig,
    gt: Sequence,
    full_grid: bool = False,
    image_size: tuple[float, float] = (300, 300),
    threads: int = 1,
) -> CoverageReport:
    """Score how well a config's anchors cover a ground-truth corpus.

    Each GT box gets the best IoU over every anchor shape of every level, with
    both rectangles placed on a common center. With ``full_grid`` the best is
    taken instead over the actual tiled anchors of an ``image_size`` image.
    """
    if len(gt) == 0:
        raise ValueError("coverage needs a non-empty ground-truth corpus")
    if full_grid:
        best = _best_grid_ious(cfg, gt, image_size)
    else:
        gts = _gt_shapes(gt)
        if np.any(gts <= 0):
            raise ValueError("coverage needs ground-truth boxes with positive width and height")
        best = best_shape_ious(all_shapes(cfg), gts, threads)
    return CoverageReport(
        mean_best_iou=float(best.mean()),
        min_best_iou=float(best.min()),
        fraction_above_half=float(np.mean(best >= 0.5)),
        count=len(best),
        best_ious=tuple(best.tolist()),
    )
