"""Boxes, boundary-context regions, IoU, NMS, and box-delta codecs.

Boxes live in continuous image coordinates (x right, y down) and are
stored center/size; widths and heights must be positive.  Context
regions derived from a proposal deliberately stay unclipped here even
when they cross the image border: pooling clamps its sampling window
instead, so the region geometry remains translation and scale
equivariant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import GeometryError


@dataclass(frozen=True)
class Box:
    """Axis-aligned box as center (cx, cy) and size (w, h), w > 0, h > 0."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise GeometryError(f"box size must be positive, got {self.w}x{self.h}")

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        if not (x2 > x1 and y2 > y1):
            raise GeometryError(f"empty corner box ({x1},{y1},{x2},{y2})")
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    def corners(self) -> tuple[float, float, float, float]:
        hw = self.w / 2.0
        hh = self.h / 2.0
        return (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)

    def area(self) -> float:
        return self.w * self.h


class ContextKind(Enum):
    """The base region plus the ten boundary contexts of a proposal."""

    BASE = "base"
    SIDE_TOP = "up"
    SIDE_BOTTOM = "down"
    SIDE_LEFT = "left"
    SIDE_RIGHT = "right"
    VERTEX_TL = "nw"
    VERTEX_TR = "ne"
    VERTEX_BR = "se"
    VERTEX_BL = "sw"
    IN_BOUNDARY = "in"
    OUT_BOUNDARY = "out"


SIDE_KINDS = (
    ContextKind.SIDE_TOP,
    ContextKind.SIDE_BOTTOM,
    ContextKind.SIDE_LEFT,
    ContextKind.SIDE_RIGHT,
)
VERTEX_KINDS = (
    ContextKind.VERTEX_TL,
    ContextKind.VERTEX_TR,
    ContextKind.VERTEX_BR,
    ContextKind.VERTEX_BL,
)
BOUNDARY_KINDS = (ContextKind.IN_BOUNDARY, ContextKind.OUT_BOUNDARY)

FAMILIES: dict[str, tuple[ContextKind, ...]] = {
    "S": SIDE_KINDS,
    "V": VERTEX_KINDS,
    "B": BOUNDARY_KINDS,
}


def generate_context(r: Box, kind: ContextKind) -> Box:
    """The context region of proposal `r` for one sub-network.

    Side regions keep one proposal extent and take 2/3 of the other,
    centered on the corresponding side midpoint.  Vertex regions take
    2/3 of both extents, centered on the corner.  The in-boundary
    region halves both extents and the out-boundary region doubles
    them, both sharing the proposal center.  The result is not clipped
    to any image.
    """
    cx, cy, w, h = r.cx, r.cy, r.w, r.h
    # 2*w/3 keeps the ratio exact for sizes divisible by three
    w23 = 2.0 * w / 3.0
    h23 = 2.0 * h / 3.0
    if kind is ContextKind.BASE:
        return r
    if kind is ContextKind.SIDE_LEFT:
        return Box(cx - w / 2.0, cy, w23, h)
    if kind is ContextKind.SIDE_RIGHT:
        return Box(cx + w / 2.0, cy, w23, h)
    if kind is ContextKind.SIDE_TOP:
        return Box(cx, cy - h / 2.0, w, h23)
    if kind is ContextKind.SIDE_BOTTOM:
        return Box(cx, cy + h / 2.0, w, h23)
    if kind is ContextKind.VERTEX_TL:
        return Box(cx - w / 2.0, cy - h / 2.0, w23, h23)
    if kind is ContextKind.VERTEX_TR:
        return Box(cx + w / 2.0, cy - h / 2.0, w23, h23)
    if kind is ContextKind.VERTEX_BR:
        return Box(cx + w / 2.0, cy + h / 2.0, w23, h23)
    if kind is ContextKind.VERTEX_BL:
        return Box(cx - w / 2.0, cy + h / 2.0, w23, h23)
    if kind is ContextKind.IN_BOUNDARY:
        return Box(cx, cy, w / 2.0, h / 2.0)
    if kind is ContextKind.OUT_BOUNDARY:
        return Box(cx, cy, 2.0 * w, 2.0 * h)
    raise GeometryError(f"unknown context kind {kind!r}")


def iou(a: Box, b: Box) -> float:
    """Intersection over union in continuous coordinates."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area() + b.area() - inter)


def nms(boxes, scores, thresh: float) -> list[int]:
    """Greedy non-maximum suppression.

    Scans boxes in descending score order (ties broken by lower input
    index) and keeps a box unless its IoU with an already kept box
    exceeds `thresh`.  Returns kept indices in selection order.
    """
    n = len(boxes)
    if len(scores) != n:
        raise GeometryError("nms needs one score per box")
    order = sorted(range(n), key=lambda i: (-float(scores[i]), i))
    kept: list[int] = []
    for i in order:
        if all(iou(boxes[i], boxes[j]) <= thresh for j in kept):
            kept.append(i)
    return kept


@dataclass(frozen=True)
class RegressionTarget:
    """Box offsets (tx, ty) and log-scale factors (tw, th)."""

    tx: float
    ty: float
    tw: float
    th: float

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tw, self.th], dtype=np.float64)


def encode_box(gt: Box, anchor: Box) -> RegressionTarget:
    """Offsets that map `anchor` onto `gt`; inverse of decode_box."""
    return RegressionTarget(
        tx=(gt.cx - anchor.cx) / anchor.w,
        ty=(gt.cy - anchor.cy) / anchor.h,
        tw=math.log(gt.w / anchor.w),
        th=math.log(gt.h / anchor.h),
    )


def decode_box(t: RegressionTarget, anchor: Box) -> Box:
    return Box(
        cx=anchor.cx + t.tx * anchor.w,
        cy=anchor.cy + t.ty * anchor.h,
        w=anchor.w * math.exp(t.tw),
        h=anchor.h * math.exp(t.th),
    )


def clip_box(b: Box, width: float, height: float) -> Box:
    """Clamp a box to [0,width] x [0,height].

    A box that leaves no positive extent inside the image cannot be
    represented and raises GeometryError.
    """
    x1, y1, x2, y2 = b.corners()
    x1 = min(max(x1, 0.0), width)
    x2 = min(max(x2, 0.0), width)
    y1 = min(max(y1, 0.0), height)
    y2 = min(max(y2, 0.0), height)
    if not (x2 > x1 and y2 > y1):
        raise GeometryError(
            f"box {b} lies outside the {width}x{height} image after clipping"
        )
    return Box.from_corners(x1, y1, x2, y2)


def boxes_to_corners(boxes) -> np.ndarray:
    """Stack boxes into an [R, 4] corner array (x1, y1, x2, y2)."""
    out = np.empty((len(boxes), 4), dtype=np.float64)
    for i, b in enumerate(boxes):
        out[i] = b.corners()
    return out
