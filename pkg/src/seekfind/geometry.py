"""Axis-aligned boxes in pixel coordinates."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    """Top-left corner plus extent; ``score`` is set only on predictions."""

    x: float
    y: float
    w: float
    h: float
    score: float | None = None

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got w={self.w}, h={self.h}")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")

    @property
    def x2(self):
        return self.x + self.w

    @property
    def y2(self):
        return self.y + self.h

    @property
    def area(self):
        return self.w * self.h

    @property
    def center(self) -> tuple:
        return (self.x + self.w / 2, self.y + self.h / 2)

    def as_tuple(self) -> tuple:
        return (self.x, self.y, self.w, self.h)

    def with_score(self, score):
        return replace(self, score=score)

    def clamp(self, frame_w, frame_h) -> "BoundingBox | None":
        """Clip to the frame; ``None`` if nothing remains."""
        x1, y1 = max(self.x, 0), max(self.y, 0)
        x2, y2 = min(self.x2, frame_w), min(self.y2, frame_h)
        if x2 <= x1 or y2 <= y1:
            return None
        return BoundingBox(x1, y1, x2 - x1, y2 - y1, self.score)

    def to_json(self) -> dict:
        d = {"x": _num(self.x), "y": _num(self.y), "w": _num(self.w), "h": _num(self.h)}
        if self.score is not None:
            d["score"] = round(float(self.score), 6)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "BoundingBox":
        return cls(d["x"], d["y"], d["w"], d["h"], d.get("score"))


def _num(v):
    return int(v) if float(v).is_integer() else float(v)


def intersection_area(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    return iw * ih if iw > 0 and ih > 0 else 0


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union; 0 for disjoint boxes."""
    inter = intersection_area(a, b)
    if inter == 0:
        return 0.0
    return float(inter / (a.area + b.area - inter))


def union_box(a: BoundingBox, b: BoundingBox, score=None) -> BoundingBox:
    x1, y1 = min(a.x, b.x), min(a.y, b.y)
    return BoundingBox(x1, y1, max(a.x2, b.x2) - x1, max(a.y2, b.y2) - y1, score)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IOU between two sequences of boxes (vectorized)."""
    if not a or not b:
        return np.zeros((len(a), len(b)))
    A = np.array([bx.as_tuple() for bx in a], dtype=np.float64)
    B = np.array([bx.as_tuple() for bx in b], dtype=np.float64)
    ax2, ay2 = A[:, 0] + A[:, 2], A[:, 1] + A[:, 3]
    bx2, by2 = B[:, 0] + B[:, 2], B[:, 1] + B[:, 3]
    iw = np.clip(np.minimum(ax2[:, None], bx2[None]) - np.maximum(A[:, None, 0], B[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(ay2[:, None], by2[None]) - np.maximum(A[:, None, 1], B[None, :, 1]), 0, None)
    inter = iw * ih
    union = (A[:, 2] * A[:, 3])[:, None] + (B[:, 2] * B[:, 3])[None] - inter
    return inter / union
