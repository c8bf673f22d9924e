"""Ground-truth and prediction file formats, and synthetic corpora.

Formats:

* COCO-style JSON: ``images[]`` (id, width, height), ``annotations[]``
  (image_id, category_id, bbox as ``[x, y, w, h]``), ``categories[]``.
* Corpus CSV: ``image_id,width,height,x1,y1,x2,y2,label``. Images without
  boxes are written as one row with empty box fields.
* Predictions CSV: ``image_id,x1,y1,x2,y2,score,label``.

All CSV files carry a header row and use UTF-8 with LF line endings.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

from detkit.evaluation import GroundTruth
from detkit.geometry import Box
from detkit.postprocess import Detection

CORPUS_HEADER = ["image_id", "width", "height", "x1", "y1", "x2", "y2", "label"]
PRED_HEADER = ["image_id", "x1", "y1", "x2", "y2", "score", "label"]


class FormatError(ValueError):
    """Raised for malformed or contract-violating input files."""


@dataclass(frozen=True)
class ImageInfo:
    image_id: Hashable
    width: float
    height: float


@dataclass
class Corpus:
    images: list[ImageInfo]
    ground_truths: list[GroundTruth]
    categories: list[tuple[Hashable, str]]
    metadata: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        sizes = {im.image_id: im for im in self.images}
        if len(sizes) != len(self.images):
            raise FormatError("duplicate image ids in corpus")
        for g in self.ground_truths:
            im = sizes.get(g.image_id)
            if im is None:
                raise FormatError(f"ground truth references unknown image {g.image_id!r}")
            if not _inside(g.box, im):
                raise FormatError(f"box {g.box.as_tuple()} lies outside image {im.image_id!r} ({im.width}x{im.height})")


# x + w in COCO bboxes can overshoot an image border by rounding alone
BORDER_SLACK = 1e-9


def _inside(b: Box, im: ImageInfo) -> bool:
    return b.x1 >= 0 and b.y1 >= 0 and b.x2 <= im.width and b.y2 <= im.height


def _snap(b: Box, im: ImageInfo) -> Box:
    """Pull corners that overshoot a border by rounding error back onto it."""
    tol = BORDER_SLACK * max(im.width, im.height, 1.0)
    x2 = im.width if im.width < b.x2 <= im.width + tol else b.x2
    y2 = im.height if im.height < b.y2 <= im.height + tol else b.y2
    if (x2, y2) == (b.x2, b.y2):
        return b
    return Box(b.x1, b.y1, x2, y2)


def _clamp(b: Box, im: ImageInfo) -> Box:
    x1 = min(max(b.x1, 0.0), im.width)
    y1 = min(max(b.y1, 0.0), im.height)
    return Box(x1, y1, min(max(b.x2, x1), im.width), min(max(b.y2, y1), im.height))


def parse_id(text: str) -> Hashable:
    """Integer-looking identifiers become ints so CSV and COCO ids agree."""
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        return text


def _num(text: str, what: str, where: str) -> float:
    try:
        v = float(text)
    except (TypeError, ValueError):
        raise FormatError(f"{where}: {what} is not a number: {text!r}") from None
    if not math.isfinite(v):
        raise FormatError(f"{where}: {what} is not finite: {text!r}")
    return v


def _fmt(v: float) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 2**53 else repr(v)


# --- writing -----------------------------------------------------------------


def atomic_write(path: str | Path, text: str) -> None:
    """Write via a temporary file in the target directory and rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def corpus_to_coco(corpus: Corpus) -> dict:
    return {
        "images": [{"id": im.image_id, "width": im.width, "height": im.height} for im in corpus.images],
        "annotations": [
            {
                "id": i + 1,
                "image_id": g.image_id,
                "category_id": g.label,
                "bbox": [g.box.x1, g.box.y1, g.box.width, g.box.height],
                "area": g.box.width * g.box.height,
                "iscrowd": 0,
            }
            for i, g in enumerate(corpus.ground_truths)
        ],
        "categories": [{"id": cid, "name": name} for cid, name in corpus.categories],
    }


def corpus_to_csv(corpus: Corpus) -> str:
    rows = []
    by_image: dict = {}
    for g in corpus.ground_truths:
        by_image.setdefault(g.image_id, []).append(g)
    for im in corpus.images:
        gts = by_image.get(im.image_id, [])
        if not gts:
            rows.append([im.image_id, _fmt(im.width), _fmt(im.height), "", "", "", "", ""])
        for g in gts:
            rows.append([im.image_id, _fmt(im.width), _fmt(im.height), *(_fmt(c) for c in g.box.as_tuple()), g.label])
    return _csv_text(CORPUS_HEADER, rows)


def save_corpus(corpus: Corpus, path: str | Path, fmt: str | None = None) -> None:
    fmt = fmt or _guess_format(path)
    if fmt == "coco-json":
        atomic_write(path, json.dumps(corpus_to_coco(corpus), indent=1) + "\n")
    else:
        atomic_write(path, corpus_to_csv(corpus))


def predictions_to_csv(dets: Sequence[Detection]) -> str:
    rows = [[d.image_id, *(_fmt(c) for c in d.box.as_tuple()), repr(float(d.score)), d.label] for d in dets]
    return _csv_text(PRED_HEADER, rows)


def save_predictions(dets: Sequence[Detection], path: str | Path) -> None:
    atomic_write(path, predictions_to_csv(dets))


# --- reading -----------------------------------------------------------------


def _guess_format(path) -> str:
    return "csv" if str(path).lower().endswith(".csv") else "coco-json"


def load_corpus(path: str | Path, fmt: str | None = None, clamp: bool = False) -> Corpus:
    """Read a corpus file.

    Out-of-bounds boxes raise :class:`FormatError` unless ``clamp`` is set, in
    which case they are clipped to the image.
    """
    fmt = fmt or _guess_format(path)
    if fmt not in ("coco-json", "csv"):
        raise ValueError(f"unknown corpus format {fmt!r}")
    with open(path, encoding="utf-8", newline="") as fh:
        text = fh.read()
    return _parse_coco(text, str(path), clamp) if fmt == "coco-json" else _parse_corpus_csv(text, str(path), clamp)


def _make_gt(box: Box, label, im: ImageInfo, where: str, clamp: bool) -> GroundTruth:
    if not _inside(box, im):
        if not clamp:
            raise FormatError(f"{where}: box {box.as_tuple()} outside image {im.image_id!r} ({im.width}x{im.height})")
        box = _clamp(box, im)
    return GroundTruth(box, label, im.image_id)


def _parse_coco(text: str, name: str, clamp: bool) -> Corpus:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{name}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise FormatError(f"{name}: top level must be an object")
    images = []
    for i, im in enumerate(data.get("images", [])):
        where = f"{name}: images[{i}]"
        try:
            images.append(ImageInfo(im["id"], _num(im["width"], "width", where), _num(im["height"], "height", where)))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{where}: missing field {exc}") from None
    by_id = {im.image_id: im for im in images}
    if len(by_id) != len(images):
        raise FormatError(f"{name}: duplicate image ids")
    gts = []
    for i, ann in enumerate(data.get("annotations", [])):
        where = f"{name}: annotations[{i}]"
        try:
            image_id, bbox, label = ann["image_id"], ann["bbox"], ann["category_id"]
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{where}: missing field {exc}") from None
        if image_id not in by_id:
            raise FormatError(f"{where}: unknown image {image_id!r}")
        if not isinstance(bbox, list) or len(bbox) != 4:
            raise FormatError(f"{where}: bbox must be [x, y, w, h]")
        x, y, w, h = (_num(v, "bbox", where) for v in bbox)
        if w < 0 or h < 0:
            raise FormatError(f"{where}: negative bbox size")
        im = by_id[image_id]
        gts.append(_make_gt(_snap(Box.from_xywh(x, y, w, h), im), label, im, where, clamp))
    cats = []
    for i, c in enumerate(data.get("categories", [])):
        try:
            cats.append((c["id"], str(c.get("name", c["id"]))))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{name}: categories[{i}]: missing field {exc}") from None
    return Corpus(images, gts, cats)


def _read_rows(text: str, name: str, header: list[str]):
    reader = csv.reader(io.StringIO(text))
    first = next(reader, None)
    if first is None:
        raise FormatError(f"{name}: empty file, expected header {','.join(header)}")
    if [h.strip() for h in first] != header:
        raise FormatError(f"{name}: line 1: expected header {','.join(header)}, got {','.join(first)}")
    for row in reader:
        if not row or all(not c.strip() for c in row):
            continue
        where = f"{name}: line {reader.line_num}"
        if len(row) != len(header):
            raise FormatError(f"{where}: expected {len(header)} fields, got {len(row)}")
        yield where, row


def _parse_corpus_csv(text: str, name: str, clamp: bool) -> Corpus:
    images: dict = {}
    gts = []
    labels: list = []
    for where, row in _read_rows(text, name, CORPUS_HEADER):
        image_id = parse_id(row[0])
        im = ImageInfo(image_id, _num(row[1], "width", where), _num(row[2], "height", where))
        prev = images.setdefault(image_id, im)
        if prev != im:
            raise FormatError(f"{where}: image {image_id!r} listed with conflicting sizes")
        if all(not c.strip() for c in row[3:]):
            continue
        coords = [_num(c, col, where) for c, col in zip(row[3:7], CORPUS_HEADER[3:7])]
        try:
            box = Box(*coords)
        except ValueError as exc:
            raise FormatError(f"{where}: {exc}") from None
        label = parse_id(row[7])
        if label not in labels:
            labels.append(label)
        gts.append(_make_gt(box, label, im, where, clamp))
    cats = [(lab, str(lab)) for lab in labels]
    return Corpus(list(images.values()), gts, cats)


def load_predictions(path: str | Path) -> list[Detection]:
    with open(path, encoding="utf-8", newline="") as fh:
        text = fh.read()
    return parse_predictions(text, str(path))


def parse_predictions(text: str, name: str = "<predictions>") -> list[Detection]:
    dets = []
    for where, row in _read_rows(text, name, PRED_HEADER):
        coords = [_num(c, col, where) for c, col in zip(row[1:5], PRED_HEADER[1:5])]
        score = _num(row[5], "score", where)
        if not 0.0 <= score <= 1.0:
            raise FormatError(f"{where}: score {score} outside [0, 1]")
        try:
            box = Box(*coords)
        except ValueError as exc:
            raise FormatError(f"{where}: {exc}") from None
        dets.append(Detection(box, score, parse_id(row[6]), parse_id(row[0])))
    return dets


# --- synthesis ---------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Generation profile. Box sizes are ``sqrt(w * h)``, log-uniform in ``size_range``."""

    num_images: int = 200
    image_width_range: tuple[float, float] = (300, 300)
    image_height_range: tuple[float, float] = (300, 300)
    boxes_per_image: tuple[int, int] = (1, 3)
    size_range: tuple[float, float] = (8, 96)
    ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    ratio_weights: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)
    seed: int = 0

    def __post_init__(self):
        if self.num_images < 1:
            raise ValueError("num_images must be positive")
        for name in ("image_width_range", "image_height_range", "size_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < lo <= hi, got {(lo, hi)}")
        lo, hi = self.boxes_per_image
        if not 0 <= lo <= hi:
            raise ValueError(f"boxes_per_image must satisfy 0 <= lo <= hi, got {(lo, hi)}")
        if len(self.ratios) != len(self.ratio_weights) or not self.ratios:
            raise ValueError("ratios and ratio_weights must be non-empty and of equal length")
        if any(r <= 0 for r in self.ratios) or any(w < 0 for w in self.ratio_weights):
            raise ValueError("ratios must be positive and weights non-negative")
        if abs(sum(self.ratio_weights) - 1.0) > 1e-9:
            raise ValueError(f"ratio weights must sum to 1, got {sum(self.ratio_weights)}")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}


MAX_REJECTIONS = 1000


def synthesize(spec: SyntheticSpec) -> Corpus:
    """Sample a reproducible corpus; true per-box ratios and sizes go in ``metadata``."""
    min_w, min_h = spec.image_width_range[0], spec.image_height_range[0]
    s_min = spec.size_range[0]
    for r in spec.ratios:
        if s_min * math.sqrt(r) > min_w or s_min / math.sqrt(r) > min_h:
            raise ValueError(f"smallest box of ratio {r} at size {s_min} does not fit a {min_w}x{min_h} image")
    rng = np.random.default_rng(spec.seed)
    log_lo, log_hi = math.log(spec.size_range[0]), math.log(spec.size_range[1])
    ratios = np.array(spec.ratios)
    weights = np.array(spec.ratio_weights) / np.sum(spec.ratio_weights)
    images, gts, true_ratios, true_sizes = [], [], [], []
    for image_id in range(1, spec.num_images + 1):
        W = float(round(rng.uniform(*spec.image_width_range)))
        H = float(round(rng.uniform(*spec.image_height_range)))
        W, H = max(W, min_w), max(H, min_h)
        images.append(ImageInfo(image_id, W, H))
        for _ in range(int(rng.integers(spec.boxes_per_image[0], spec.boxes_per_image[1] + 1))):
            r = float(ratios[rng.choice(len(ratios), p=weights)])
            for _attempt in range(MAX_REJECTIONS):
                s = math.exp(rng.uniform(log_lo, log_hi))
                w, h = s * math.sqrt(r), s / math.sqrt(r)
                if w <= W and h <= H:
                    break
            else:
                raise ValueError(f"could not place a box of ratio {r} in a {W}x{H} image")
            x = rng.uniform(0, W - w)
            y = rng.uniform(0, H - h)
            gts.append(GroundTruth(Box(x, y, min(x + w, W), min(y + h, H)), 1, image_id))
            true_ratios.append(r)
            true_sizes.append(s)
    corpus = Corpus(images, gts, [(1, "polyp")])
    corpus.metadata = {"spec": spec.to_dict(), "ratios": true_ratios, "sizes": true_sizes}
    return corpus
