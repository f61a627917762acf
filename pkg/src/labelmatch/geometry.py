"""Axis-aligned boxes, detections and IoU.

Boxes use the corner convention ``(x1, y1, x2, y2)`` with continuous area
``(x2 - x1) * (y2 - y1)`` (no +1 pixel correction).  COCO ``[x, y, w, h]``
boxes are converted at the I/O boundary with :meth:`BBox.from_xywh`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBox, NonFinite


def validate_box(b) -> None:
    """Raise unless ``b`` (a :class:`BBox` or 4-sequence) is a proper box."""
    x1, y1, x2, y2 = b
    isfinite = math.isfinite
    if not (isfinite(x1) and isfinite(y1) and isfinite(x2) and isfinite(y2)):
        raise NonFinite(f"non-finite box coordinate in {(x1, y1, x2, y2)}")
    if x2 <= x1 or y2 <= y1:
        raise DegenerateBox(f"degenerate box {(x1, y1, x2, y2)}")


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        validate_box(self)

    def __iter__(self):
        yield self.x1
        yield self.y1
        yield self.x2
        yield self.y2

    @classmethod
    def from_xywh(cls, x, y, w, h) -> "BBox":
        return cls(float(x), float(y), float(x) + float(w), float(y) + float(h))

    def to_xywh(self) -> list[float]:
        return [self.x1, self.y1, self.x2 - self.x1, self.y2 - self.y1]

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def translate(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=float)


@dataclass(frozen=True)
class Detection:
    box: BBox
    class_id: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if self.class_id < 1:
            raise ValueError(f"class id {self.class_id} must be >= 1")


@dataclass(frozen=True)
class GroundTruthObject:
    box: BBox
    class_id: int

    def __post_init__(self):
        if self.class_id < 1:
            raise ValueError(f"class id {self.class_id} must be >= 1")


def iou(a, b) -> float:
    validate_box(a)
    validate_box(b)
    ax1, ay1, ax2, ay2 = (float(v) for v in a)
    bx1, by1, bx2, by2 = (float(v) for v in b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def boxes_to_array(boxes) -> np.ndarray:
    """Stack boxes (BBox objects or 4-sequences) into an ``(n, 4)`` array."""
    if len(boxes) == 0:
        return np.zeros((0, 4), dtype=float)
    return np.array([tuple(b) for b in boxes], dtype=float)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(n, 4)`` and ``(m, 4)`` corner arrays.

    Inputs are assumed valid; this is the vectorized path used by NMS,
    assignment and metrics.  Agrees with :func:`iou` elementwise.
    """
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0.0, inter / np.where(union > 0, union, 1.0), 0.0)
