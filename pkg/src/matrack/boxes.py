"""Axis-aligned bounding boxes and plain-float box arithmetic.

Boxes are (x, y, w, h) with (x, y) the top-left corner, in pixels.
The SIoU reference formula here (angle, distance, shape and IoU terms)
is the non-differentiable oracle; the training loss re-implements the
same formula on autograd scalars and is tested against this one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"degenerate box: w={self.w}, h={self.h}")

    @property
    def cx(self) -> float:
        return self.x + self.w / 2.0

    @property
    def cy(self) -> float:
        return self.y + self.h / 2.0

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BoundingBox":
        return cls(cx - w / 2.0, cy - h / 2.0, w, h)

    def clamp_to(self, width: int, height: int, min_side: float = 2.0) -> "BoundingBox":
        """Clamp the box into [0, width] x [0, height], keeping a minimum side."""
        w = min(max(self.w, min_side), width)
        h = min(max(self.h, min_side), height)
        x = min(max(self.x, 0.0), width - w)
        y = min(max(self.y, 0.0), height - h)
        return BoundingBox(x, y, w, h)

    def translate(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x + dx, self.y + dy, self.w, self.h)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # areas from the same corner arithmetic as the intersection, so that
    # identical boxes give exactly 1.0 despite (x + w) - x != w in floats
    area_a = (a.x2 - a.x) * (a.y2 - a.y)
    area_b = (b.x2 - b.x) * (b.y2 - b.y)
    return inter / (area_a + area_b - inter)


def cle(a: BoundingBox, b: BoundingBox) -> float:
    """Center location error in pixels."""
    return math.hypot(a.cx - b.cx, a.cy - b.cy)


def cle_normalized(pred: BoundingBox, gt: BoundingBox) -> float:
    """Center error with each component scaled by the gt box side."""
    return math.hypot((pred.cx - gt.cx) / gt.w, (pred.cy - gt.cy) / gt.h)


def siou_reference(pred: BoundingBox, gt: BoundingBox) -> float:
    """SIoU loss: 1 - IoU + (distance + shape costs)/2.

    Angle cost modulates the distance cost; shape cost uses exponent 4.
    Identical boxes give exactly 0.
    """
    v = iou(pred, gt)

    s_cw = gt.cx - pred.cx
    s_ch = gt.cy - pred.cy
    sigma = math.sqrt(s_cw * s_cw + s_ch * s_ch)
    if sigma == 0.0:
        angle = 0.0
    else:
        sin_w = abs(s_cw) / sigma
        sin_h = abs(s_ch) / sigma
        sin_used = sin_h if sin_w > math.sqrt(2.0) / 2.0 else sin_w
        angle = math.cos(2.0 * math.asin(sin_used) - math.pi / 2.0)

    cw = max(pred.x2, gt.x2) - min(pred.x, gt.x)
    ch = max(pred.y2, gt.y2) - min(pred.y, gt.y)
    gamma = 2.0 - angle
    rho_x = (s_cw / cw) ** 2
    rho_y = (s_ch / ch) ** 2
    distance = (1.0 - math.exp(-gamma * rho_x)) + (1.0 - math.exp(-gamma * rho_y))

    omega_w = abs(pred.w - gt.w) / max(pred.w, gt.w)
    omega_h = abs(pred.h - gt.h) / max(pred.h, gt.h)
    shape = (1.0 - math.exp(-omega_w)) ** 4 + (1.0 - math.exp(-omega_h)) ** 4

    return 1.0 - v + (distance + shape) / 2.0
