"""Shared test fixtures and independent oracle helpers."""

from __future__ import annotations

from fractions import Fraction

import pytest

from pseudolab.datasets import Annotation, DatasetSnapshot, ImageRecord
from pseudolab.geometry import BBox


def raster_iou(a: BBox, b: BBox, cells_per_unit: int = 4) -> float:
    """IoU measured by counting sub-pixel cells, independent of the interval
    arithmetic in the implementation. Exact when all edges land on the cell
    grid, so tests use boxes with coordinates in quarter-pixel units."""
    s = Fraction(1, cells_per_unit)

    def cells(box):
        x0, y0 = Fraction(box.x), Fraction(box.y)
        x1, y1 = x0 + Fraction(box.w), y0 + Fraction(box.h)
        out = set()
        cx = x0
        while cx < x1:
            cy = y0
            while cy < y1:
                out.add((cx, cy))
                cy += s
            cx += s
        return out

    ca, cb = cells(a), cells(b)
    union = len(ca | cb)
    return len(ca & cb) / union if union else 0.0


def make_image(image_id="im0", width=100.0, height=100.0, annotations=(),
               hidden_truth=None):
    return ImageRecord(image_id=image_id, width=width, height=height,
                       annotations=tuple(annotations),
                       hidden_truth=None if hidden_truth is None else tuple(hidden_truth))


def manual(x, y, w, h, c=1):
    return Annotation.manual(BBox(x, y, w, h), c)


def pseudo(x, y, w, h, c=1, confidence=0.5, round_index=1):
    return Annotation.pseudo(BBox(x, y, w, h), c, confidence, round_index)


@pytest.fixture
def tiny_snapshot():
    images = (
        make_image("a", 100, 100, [manual(10, 10, 20, 20, 1), manual(50, 50, 8, 8, 2)]),
        make_image("b", 100, 100, [manual(30, 40, 10, 10, 3)]),
        make_image("c", 100, 100, []),
    )
    return DatasetSnapshot(images=images)
