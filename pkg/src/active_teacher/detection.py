"""Box geometry, NMS, confidence filtering and a small AP evaluator.

Boxes are stored in corner form ``(x_min, y_min, x_max, y_max)``. Center
form ``(cx, cy, w, h)`` is only produced on demand by :func:`to_center_form`.
Everything here is pure; the array helpers are what the training loop uses,
the object-level functions wrap them for the scoring and I/O paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

PROB_TOL = 1e-6
COCO_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {coords}: need x_min < x_max and y_min < y_max")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=float)

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BBox":
        """Build from COCO convention: top-left corner plus width/height."""
        return cls(x, y, x + w, y + h)


def to_center_form(box: BBox) -> tuple[float, float, float, float]:
    """Return ``(cx, cy, w, h)`` for a corner-form box."""
    w = box.x_max - box.x_min
    h = box.y_max - box.y_min
    return box.x_min + 0.5 * w, box.y_min + 0.5 * h, w, h


def from_center_form(cx: float, cy: float, w: float, h: float) -> BBox:
    return BBox(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


@dataclass(frozen=True, eq=False)
class Detection:
    """One predicted box with its full class distribution.

    ``confidence`` and ``category`` are redundant with ``probs`` and are
    checked against it; use :meth:`from_probs` to derive them.
    """

    bbox: BBox
    probs: np.ndarray
    confidence: float
    category: int

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim != 1 or probs.size < 2:
            raise ValueError(f"probs must be a vector over >= 2 categories, got shape {probs.shape}")
        if np.any(probs < 0) or not np.all(np.isfinite(probs)):
            raise ValueError("probs must be finite and non-negative")
        if abs(probs.sum() - 1.0) > PROB_TOL:
            raise ValueError(f"probs sum to {probs.sum():.8f}, expected 1")
        if int(np.argmax(probs)) != self.category:
            raise ValueError(f"category {self.category} is not argmax of probs")
        if abs(float(probs.max()) - self.confidence) > PROB_TOL:
            raise ValueError(f"confidence {self.confidence} != max(probs) {probs.max()}")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def from_probs(cls, bbox: BBox, probs) -> "Detection":
        probs = np.asarray(probs, dtype=float)
        k = int(np.argmax(probs))
        return cls(bbox, probs, float(probs[k]), k)

    @property
    def num_classes(self) -> int:
        return self.probs.size


@dataclass
class ImagePredictions:
    image_id: Hashable
    detections: list[Detection] = field(default_factory=list)
    surrogate: bool = False

    def __post_init__(self):
        sizes = {d.num_classes for d in self.detections}
        if len(sizes) > 1:
            raise ValueError(f"image {self.image_id!r}: detections disagree on class count {sorted(sizes)}")

    def __len__(self):
        return len(self.detections)


# ---------------------------------------------------------------------------
# array-level primitives
# ---------------------------------------------------------------------------


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between corner-form box arrays of shape (n, 4) and (m, 4)."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def nms_indices(boxes: np.ndarray, scores: np.ndarray, labels: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy class-wise NMS on arrays; returns kept indices, highest score first.

    Equal scores keep their input order.
    """
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        return np.zeros(0, dtype=int)
    labels = np.asarray(labels)
    order = np.argsort(-scores, kind="stable")
    ious = iou_matrix(boxes, boxes)
    kept: list[int] = []
    for i in order:
        if not any(labels[k] == labels[i] and ious[k, i] > iou_threshold for k in kept):
            kept.append(int(i))
    return np.asarray(kept, dtype=int)


def smooth_l1(x):
    """0.5 x^2 inside the unit interval, |x| - 0.5 outside. Works elementwise."""
    ax = np.abs(x)
    out = np.where(ax < 1.0, 0.5 * np.square(np.minimum(ax, 1.0)), ax - 0.5)
    return float(out) if np.ndim(out) == 0 else out


def smooth_l1_grad(x):
    return np.clip(x, -1.0, 1.0)


# ---------------------------------------------------------------------------
# object-level operations
# ---------------------------------------------------------------------------


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def nms(dets: Sequence[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    if not dets:
        return []
    boxes = np.stack([d.bbox.as_array() for d in dets])
    scores = np.array([d.confidence for d in dets])
    labels = np.array([d.category for d in dets])
    return [dets[i] for i in nms_indices(boxes, scores, labels, iou_threshold)]


def filter_by_confidence(dets: Iterable[Detection], tau: float) -> list[Detection]:
    """Keep detections whose confidence is at least ``tau`` (inclusive)."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    return [d for d in dets if d.confidence >= tau]


def _average_precision(tp: np.ndarray, n_truth: int) -> float:
    # all-point interpolation over a confidence-sorted TP/FP sequence
    if n_truth == 0:
        return float("nan")
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_truth
    precision = ctp / np.arange(1, tp.size + 1)
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def evaluate_ap(
    preds: Sequence[ImagePredictions],
    truths: Mapping[Hashable, Sequence[tuple[int, BBox]]],
    iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
) -> float:
    """Mean AP over IoU thresholds and the categories present in ``truths``.

    Predictions of each category are matched greedily in descending
    confidence order; each truth box is matched at most once, to the
    unmatched truth of highest IoU provided it reaches the threshold.
    Images present in ``truths`` but absent from ``preds`` count as having
    no detections.
    """
    by_image = {}
    for p in preds:
        if p.image_id not in truths:
            raise ValueError(f"no ground truth for image_id {p.image_id!r}")
        by_image[p.image_id] = p.detections

    categories = sorted({c for objs in truths.values() for c, _ in objs})
    if not categories:
        return 0.0

    gt_arrays = {}
    for img, objs in truths.items():
        for c in categories:
            gt_arrays[img, c] = np.array([b.as_array() for k, b in objs if k == c]).reshape(-1, 4)

    aps = []
    for c in categories:
        n_truth = sum(len(gt_arrays[img, c]) for img in truths)
        entries = [
            (det.confidence, img, det.bbox.as_array())
            for img, dets in by_image.items()
            for det in dets
            if det.category == c
        ]
        order = sorted(range(len(entries)), key=lambda i: -entries[i][0])
        ious = []
        for i in order:
            _, img, box = entries[i]
            gts = gt_arrays[img, c]
            ious.append((img, iou_matrix(box[None], gts)[0] if len(gts) else np.zeros(0)))
        for thr in iou_thresholds:
            used = {img: np.zeros(len(gt_arrays[img, c]), dtype=bool) for img in truths}
            tp = np.zeros(len(order))
            for n, (img, row) in enumerate(ious):
                if row.size == 0:
                    continue
                cand = np.where(used[img], -1.0, row)
                j = int(np.argmax(cand))
                if cand[j] >= thr:
                    used[img][j] = True
                    tp[n] = 1.0
            aps.append(_average_precision(tp, n_truth))
    return float(np.mean(aps))
