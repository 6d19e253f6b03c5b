"""Box parameterizations, conversions, IoU measures and motion application.

Boxes come in two forms: the edge-distance form used throughout the
refiner (center plus four non-negative distances to the top/left/bottom/
right edges, robust to targets cropped by image borders) and the plain
corner form used for IoU computation and MOT file interchange.

Everything here is pure double-precision value arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class EdgeBox:
    """Box as center (cx, cy) plus distances to the four edges.

    All distances are non-negative; the center may lie anywhere,
    including outside the image.
    """

    cx: float
    cy: float
    ad_tp: float
    ad_lf: float
    ad_bt: float
    ad_rt: float

    def is_valid(self) -> bool:
        return min(self.ad_tp, self.ad_lf, self.ad_bt, self.ad_rt) >= 0.0


@dataclass(frozen=True)
class CornerBox:
    """Axis-aligned box as (x1, y1, x2, y2) with x1 <= x2, y1 <= y2."""

    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1


@dataclass(frozen=True)
class Motion:
    """Additive offset for an EdgeBox: center shift plus edge-distance deltas.

    Used both for backward motions (frame t -> t-1) and for per-layer box
    corrections; same shape, different role.
    """

    dcx: float
    dcy: float
    d_ad_tp: float = 0.0
    d_ad_lf: float = 0.0
    d_ad_bt: float = 0.0
    d_ad_rt: float = 0.0


ZERO_MOTION = Motion(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


def edge_to_corner(b: EdgeBox) -> CornerBox:
    """Corner form of an edge-distance box."""
    return CornerBox(b.cx - b.ad_lf, b.cy - b.ad_tp, b.cx + b.ad_rt, b.cy + b.ad_bt)


def corner_to_edge(c: CornerBox) -> EdgeBox:
    """Edge-distance form with the center placed at the box midpoint."""
    cx = 0.5 * (c.x1 + c.x2)
    cy = 0.5 * (c.y1 + c.y2)
    return EdgeBox(cx, cy, cy - c.y1, cx - c.x1, c.y2 - cy, c.x2 - cx)


def iou(a: CornerBox, b: CornerBox) -> float:
    """Intersection over union; a pair of zero-area boxes has IoU 0."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def giou_loss(a: CornerBox, b: CornerBox, generalized: bool = True) -> float:
    """IoU-family loss in [0, 2]: 1 - GIoU, or 1 - IoU when generalized=False.

    Falls back to 1 - IoU when the enclosing box is degenerate.
    """
    i = iou(a, b)
    if not generalized:
        return 1.0 - i
    ex1, ey1 = min(a.x1, b.x1), min(a.y1, b.y1)
    ex2, ey2 = max(a.x2, b.x2), max(a.y2, b.y2)
    enclose = (ex2 - ex1) * (ey2 - ey1)
    if enclose <= 0.0:
        return 1.0 - i
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = a.area + b.area - inter
    giou = i - (enclose - union) / enclose
    return 1.0 - giou


def apply_motion(b: EdgeBox, m: Motion) -> EdgeBox:
    """Component-wise sum; resulting edge distances are clamped at 0."""
    return EdgeBox(
        b.cx + m.dcx,
        b.cy + m.dcy,
        max(b.ad_tp + m.d_ad_tp, 0.0),
        max(b.ad_lf + m.d_ad_lf, 0.0),
        max(b.ad_bt + m.d_ad_bt, 0.0),
        max(b.ad_rt + m.d_ad_rt, 0.0),
    )


def box_l1(a: EdgeBox, b: EdgeBox) -> float:
    """Sum of absolute component differences between two edge boxes."""
    return (
        abs(a.cx - b.cx)
        + abs(a.cy - b.cy)
        + abs(a.ad_tp - b.ad_tp)
        + abs(a.ad_lf - b.ad_lf)
        + abs(a.ad_bt - b.ad_bt)
        + abs(a.ad_rt - b.ad_rt)
    )


def center_distance(a: EdgeBox, b: EdgeBox) -> float:
    return math.hypot(a.cx - b.cx, a.cy - b.cy)
