"""Bounding boxes in center+size convention.

Internally every box is (center_x, center_y, width, height) in continuous
pixels.  On disk the convention is top-left+size, matching the common
benchmark annotation format; the converters live here so the two never mix.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ContractViolationError


@dataclass(frozen=True)
class BoundingBox:
    cx: float
    cy: float
    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ContractViolationError(
                f"box size must be positive, got {self.width}x{self.height}"
            )

    @classmethod
    def from_topleft(cls, x: float, y: float, width: float, height: float) -> "BoundingBox":
        return cls(x + width / 2.0, y + height / 2.0, width, height)

    def to_topleft(self) -> tuple:
        return (self.cx - self.width / 2.0, self.cy - self.height / 2.0, self.width, self.height)

    def scaled(self, factor: float) -> "BoundingBox":
        return BoundingBox(self.cx, self.cy, self.width * factor, self.height * factor)

    def moved_to(self, cx: float, cy: float) -> "BoundingBox":
        return BoundingBox(cx, cy, self.width, self.height)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union; 0 for disjoint boxes."""
    ax0, ay0, aw, ah = a.to_topleft()
    bx0, by0, bw, bh = b.to_topleft()
    ix0 = max(ax0, bx0)
    iy0 = max(ay0, by0)
    ix1 = min(ax0 + aw, bx0 + bw)
    iy1 = min(ay0 + ah, by0 + bh)
    iw = max(0.0, ix1 - ix0)
    ih = max(0.0, iy1 - iy0)
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def center_error(a: BoundingBox, b: BoundingBox) -> float:
    """Euclidean distance between box centers, in pixels."""
    return math.hypot(a.cx - b.cx, a.cy - b.cy)
