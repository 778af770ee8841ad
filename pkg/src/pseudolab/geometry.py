"""Axis-aligned box arithmetic and the center-focus match criterion.

Boxes live in continuous pixel coordinates with the origin at the image
top-left: x grows rightward, y grows downward. A box is its top-left
corner plus a strictly positive width and height.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

__all__ = ["BBox", "CfParams", "area", "iou", "contains_center", "cf_match"]


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box: top-left corner (x, y) and size (w, h) in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v):
                raise ValueError(f"BBox.{name} must be a finite number, got {v!r}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"BBox sides must be > 0, got w={self.w!r} h={self.h!r}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def center(self) -> tuple[float, float]:
        return self.x + self.w / 2.0, self.y + self.h / 2.0

    def translated(self, dx: float, dy: float) -> BBox:
        return BBox(self.x + dx, self.y + dy, self.w, self.h)


@dataclass(frozen=True)
class CfParams:
    """Parameters of the center-focus match.

    iou_floor is the strict lower bound the overlap must exceed;
    boundary_inclusive controls whether a center sitting exactly on the
    proposal edge counts as contained.
    """

    iou_floor: float = 0.1
    boundary_inclusive: bool = True

    def __post_init__(self):
        if not (0 <= self.iou_floor < 1) or not math.isfinite(self.iou_floor):
            raise ValueError(f"iou_floor must lie in [0, 1), got {self.iou_floor!r}")


def area(box: BBox) -> float:
    return float(box.w) * float(box.h)


def iou(a: BBox, b: BBox) -> float:
    """Intersection-over-union of two boxes; 0.0 when interiors are disjoint."""
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    if ix <= 0:
        return 0.0
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.w * a.h + b.w * b.h - inter)


def contains_center(proposal: BBox, gt: BBox, params: CfParams = CfParams()) -> bool:
    """Whether the proposal box contains the ground-truth box's center point."""
    cx = gt.x + gt.w / 2.0
    cy = gt.y + gt.h / 2.0
    if params.boundary_inclusive:
        return proposal.x <= cx <= proposal.x + proposal.w and proposal.y <= cy <= proposal.y + proposal.h
    return proposal.x < cx < proposal.x + proposal.w and proposal.y < cy < proposal.y + proposal.h


def cf_match(proposal: BBox, gt: BBox, params: CfParams = CfParams()) -> bool:
    """Center-focus match: overlap strictly above the floor AND the proposal
    contains the ground-truth center.

    Built for mini lesions, where demanding a large plain IoU is too harsh:
    a proposal that clearly sits on the lesion should count as a hit.
    """
    return iou(proposal, gt) > params.iou_floor and contains_center(proposal, gt, params)
