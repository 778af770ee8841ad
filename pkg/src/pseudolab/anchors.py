"""Anchor grids, pyramid configurations, and lesion coverage measurement.

This is a geometry-only study tool: it answers whether any anchor of a
given feature-pyramid configuration can match a lesion box, without
touching features or training. Coverage over a sampled lesion
population shows how input resolution and extra pyramid levels change
the reachable fraction of small lesions.

Coverage is exact. For a fixed anchor shape on a fixed stride grid, the
best-overlapping placement is the grid center nearest the lesion center
(per axis): one-dimensional overlap is non-increasing in the
center-to-center distance, IoU is increasing in intersection when box
areas are fixed, and center containment also only degrades with
distance. Checking that single placement per (level, shape) therefore
equals enumerating every anchor on the image, at any image size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import BBox, CfParams
from .streams import stream_rng
from .validation import CATEGORIES, check_positive

# Mean lesion-to-image area ratios observed per category, used as the
# centers of the sampled size distributions.
DEFAULT_MEAN_AREA_RATIOS = {1: 7.244e-4, 2: 5.390e-4, 3: 3.1672e-3, 4: 2.3976e-3}

# Log-spread of lesion areas and per-category truncation (in standard
# units) keeping sampled boxes inside a practical size range.
DEFAULT_SIGMA_LOG = 1.6
DEFAULT_Z_RANGES = {1: (-3.0, 2.2), 2: (-3.0, 2.2), 3: (-3.0, 1.75), 4: (-3.0, 1.9)}

ASPECT_CHOICES = (0.5, 1.0, 2.0)


@dataclass(frozen=True)
class FpnLevel:
    name: str
    stride: int

    def __post_init__(self):
        if not isinstance(self.stride, int) or self.stride < 1:
            raise ValueError(f"stride must be an int >= 1, got {self.stride!r}")


@dataclass(frozen=True)
class FpnConfig:
    levels: tuple[FpnLevel, ...]

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        if not self.levels:
            raise ValueError("a pyramid needs at least one level")
        strides = [lv.stride for lv in self.levels]
        for a, b in zip(strides, strides[1:]):
            if b != 2 * a:
                raise ValueError(
                    f"adjacent strides must double, got {a} then {b}")


STANDARD_FPN = FpnConfig(levels=(
    FpnLevel("P2", 4), FpnLevel("P3", 8), FpnLevel("P4", 16), FpnLevel("P5", 32)))

DEEPER_FPN = FpnConfig(levels=(
    FpnLevel("F0", 2), FpnLevel("F1", 4), FpnLevel("F2", 8),
    FpnLevel("F3", 16), FpnLevel("F4", 32), FpnLevel("F5", 64)))

PYRAMIDS = {"standard": STANDARD_FPN, "deeper": DEEPER_FPN}


@dataclass(frozen=True)
class AnchorConfig:
    """Shared anchor shapes for every level: the base side equals the
    level stride, so scale s and ratio r give width base*s*sqrt(r) and
    height base*s/sqrt(r) (area-preserving aspect)."""

    scales: tuple[float, ...] = (1.0, 2.0, 4.0, 8.0)
    ratios: tuple[float, ...] = (0.5, 1.0, 2.0)

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        for s in self.scales:
            check_positive(s, "scale")
        for r in self.ratios:
            check_positive(r, "ratio")

    @property
    def anchors_per_location(self) -> int:
        return len(self.scales) * len(self.ratios)

    def shapes_for_stride(self, stride: int) -> list[tuple[float, float]]:
        return [(stride * s * math.sqrt(r), stride * s / math.sqrt(r))
                for s in self.scales for r in self.ratios]


def grid_dim(image_size: float, stride: int) -> int:
    return max(int(math.ceil(image_size / stride)), 1)


def generate_anchors(image_size: float, fpn: FpnConfig = STANDARD_FPN,
                     anchors: AnchorConfig = AnchorConfig()
                     ) -> dict[str, np.ndarray]:
    """Enumerate every anchor per level as an (N, 4) array of x, y, w, h.

    Each level lays a ceil(size/stride)^2 grid of cell centers and puts
    every configured shape at each center. Anchors near borders may
    overhang the image; they are not clipped.
    """
    check_positive(image_size, "image_size")
    out = {}
    for level in fpn.levels:
        n = grid_dim(image_size, level.stride)
        centers = (np.arange(n) + 0.5) * level.stride
        cx, cy = np.meshgrid(centers, centers, indexing="ij")
        shapes = np.array(anchors.shapes_for_stride(level.stride))
        w = np.broadcast_to(shapes[:, 0], (n * n, len(shapes))).ravel()
        h = np.broadcast_to(shapes[:, 1], (n * n, len(shapes))).ravel()
        cxs = np.repeat(cx.ravel(), len(shapes))
        cys = np.repeat(cy.ravel(), len(shapes))
        out[level.name] = np.column_stack([cxs - w / 2, cys - h / 2, w, h])
    return out


def _best_placement_hit(cx, cy, w, h, image_size, stride, aw, ah,
                        matcher, iou_threshold, cf):
    """Vectorized: does the best placement of an (aw, ah) anchor on the
    stride grid match each lesion box? Arrays cx, cy, w, h are aligned."""
    n = grid_dim(image_size, stride)
    gx = (np.clip(np.round(cx / stride - 0.5), 0, n - 1) + 0.5) * stride
    gy = (np.clip(np.round(cy / stride - 0.5), 0, n - 1) + 0.5) * stride
    dx = np.abs(cx - gx)
    dy = np.abs(cy - gy)
    ox = np.clip(np.minimum(w, aw) / 2 + np.maximum(w, aw) / 2 - dx, 0,
                 np.minimum(w, aw))
    oy = np.clip(np.minimum(h, ah) / 2 + np.maximum(h, ah) / 2 - dy, 0,
                 np.minimum(h, ah))
    inter = ox * oy
    union = w * h + aw * ah - inter
    iou = inter / union
    if matcher == "iou":
        return iou >= iou_threshold
    if cf.boundary_inclusive:
        contains = (dx <= aw / 2) & (dy <= ah / 2)
    else:
        contains = (dx < aw / 2) & (dy < ah / 2)
    return (iou > cf.iou_floor) & contains


def _check_coverage_args(gt_boxes, image_size, matcher, iou_threshold):
    if not gt_boxes:
        raise ValueError("coverage is undefined for an empty lesion list")
    if matcher not in ("cf", "iou"):
        raise ValueError(f"matcher must be 'cf' or 'iou', got {matcher!r}")
    if matcher == "iou" and not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    check_positive(image_size, "image_size")


def coverage(gt_boxes: Sequence[BBox], image_size: float,
             fpn: FpnConfig = STANDARD_FPN,
             anchors: AnchorConfig = AnchorConfig(),
             matcher: str = "cf", iou_threshold: float = 0.5,
             cf: CfParams = CfParams()) -> float:
    """Fraction of lesion boxes matched by at least one anchor.

    matcher "cf" uses the center-focus rule (IoU strictly above the
    floor and the anchor containing the lesion center); matcher "iou"
    uses IoU >= iou_threshold. The result equals brute-force enumeration
    of every anchor (see the module docstring) at any image size.
    """
    _check_coverage_args(gt_boxes, image_size, matcher, iou_threshold)
    cx = np.array([b.x + b.w / 2 for b in gt_boxes])
    cy = np.array([b.y + b.h / 2 for b in gt_boxes])
    w = np.array([b.w for b in gt_boxes])
    h = np.array([b.h for b in gt_boxes])
    covered = np.zeros(len(gt_boxes), dtype=bool)
    for level in fpn.levels:
        for aw, ah in anchors.shapes_for_stride(level.stride):
            covered |= _best_placement_hit(cx, cy, w, h, image_size,
                                           level.stride, aw, ah,
                                           matcher, iou_threshold, cf)
            if covered.all():
                return 1.0
    return float(covered.mean())


def coverage_enumerated(gt_boxes: Sequence[BBox], image_size: float,
                        fpn: FpnConfig = STANDARD_FPN,
                        anchors: AnchorConfig = AnchorConfig(),
                        matcher: str = "cf", iou_threshold: float = 0.5,
                        cf: CfParams = CfParams()) -> float:
    """Coverage by explicit enumeration, scalable to full image sizes.

    Every anchor whose placement can intersect a still-uncovered box is
    tested individually. Anchors outside a box's overlap window have
    zero intersection and so cannot match under either matcher (both
    require positive IoU); levels are walked coarse to fine so large
    boxes drop out before the fine grids are expanded. Independent of
    coverage()'s single-placement argument; the two must agree exactly.
    """
    _check_coverage_args(gt_boxes, image_size, matcher, iou_threshold)
    cx = np.array([b.x + b.w / 2 for b in gt_boxes])
    cy = np.array([b.y + b.h / 2 for b in gt_boxes])
    w = np.array([b.w for b in gt_boxes])
    h = np.array([b.h for b in gt_boxes])
    covered = np.zeros(len(gt_boxes), dtype=bool)
    for level in sorted(fpn.levels, key=lambda lv: -lv.stride):
        s = level.stride
        n = grid_dim(image_size, s)
        for aw, ah in anchors.shapes_for_stride(s):
            live = ~covered
            if not live.any():
                break
            lcx, lcy, lw, lh = cx[live], cy[live], w[live], h[live]
            # all grid indices whose anchor overlaps the box, axis-wise
            rx = (lw + aw) / 2
            ry = (lh + ah) / 2
            ix_lo = np.clip(np.floor((lcx - rx) / s - 0.5), 0, n - 1).astype(int)
            ix_hi = np.clip(np.ceil((lcx + rx) / s - 0.5), 0, n - 1).astype(int)
            iy_lo = np.clip(np.floor((lcy - ry) / s - 0.5), 0, n - 1).astype(int)
            iy_hi = np.clip(np.ceil((lcy + ry) / s - 0.5), 0, n - 1).astype(int)
            nx = ix_hi - ix_lo + 1
            ny = iy_hi - iy_lo + 1
            total = nx * ny
            box_of = np.repeat(np.arange(live.sum()), total)
            offs = np.arange(total.sum()) - np.repeat(np.cumsum(total) - total, total)
            gx = (ix_lo[box_of] + offs // ny[box_of] + 0.5) * s
            gy = (iy_lo[box_of] + offs % ny[box_of] + 0.5) * s
            dx = np.abs(lcx[box_of] - gx)
            dy = np.abs(lcy[box_of] - gy)
            bw, bh = lw[box_of], lh[box_of]
            ox = np.clip(np.minimum(bw, aw) / 2 + np.maximum(bw, aw) / 2 - dx,
                         0, np.minimum(bw, aw))
            oy = np.clip(np.minimum(bh, ah) / 2 + np.maximum(bh, ah) / 2 - dy,
                         0, np.minimum(bh, ah))
            inter = ox * oy
            iou = inter / (bw * bh + aw * ah - inter)
            if matcher == "iou":
                hit = iou >= iou_threshold
            elif cf.boundary_inclusive:
                hit = (iou > cf.iou_floor) & (dx <= aw / 2) & (dy <= ah / 2)
            else:
                hit = (iou > cf.iou_floor) & (dx < aw / 2) & (dy < ah / 2)
            newly = np.zeros(live.sum(), dtype=bool)
            np.logical_or.at(newly, box_of[hit], True)
            covered[np.flatnonzero(live)[newly]] = True
    return float(covered.mean())


def coverage_brute_force(gt_boxes: Sequence[BBox], image_size: float,
                         fpn: FpnConfig = STANDARD_FPN,
                         anchors: AnchorConfig = AnchorConfig(),
                         matcher: str = "cf", iou_threshold: float = 0.5,
                         cf: CfParams = CfParams()) -> float:
    """Coverage by literally testing every anchor. Quadratic and slow;
    exists as the independent check of the nearest-placement shortcut."""
    _check_coverage_args(gt_boxes, image_size, matcher, iou_threshold)
    per_level = generate_anchors(image_size, fpn, anchors)
    all_anchors = np.concatenate(list(per_level.values()), axis=0)
    ax1, ay1 = all_anchors[:, 0], all_anchors[:, 1]
    ax2, ay2 = ax1 + all_anchors[:, 2], ay1 + all_anchors[:, 3]
    area_a = all_anchors[:, 2] * all_anchors[:, 3]
    hits = 0
    for b in gt_boxes:
        iw = np.clip(np.minimum(ax2, b.x + b.w) - np.maximum(ax1, b.x), 0, None)
        ih = np.clip(np.minimum(ay2, b.y + b.h) - np.maximum(ay1, b.y), 0, None)
        inter = iw * ih
        iou = inter / (area_a + b.w * b.h - inter)
        if matcher == "iou":
            ok = iou >= iou_threshold
        else:
            mx, my = b.x + b.w / 2, b.y + b.h / 2
            if cf.boundary_inclusive:
                contains = (ax1 <= mx) & (mx <= ax2) & (ay1 <= my) & (my <= ay2)
            else:
                contains = (ax1 < mx) & (mx < ax2) & (ay1 < my) & (my < ay2)
            ok = (iou > cf.iou_floor) & contains
        hits += bool(ok.any())
    return hits / len(gt_boxes)


def _phi(z: float) -> float:
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2)))


def _truncated_mean_factor(sigma: float, z_lo: float, z_hi: float) -> float:
    """E[exp(sigma * Z)] for Z standard normal truncated to (z_lo, z_hi)."""
    denom = _phi(z_hi) - _phi(z_lo)
    if denom <= 0:
        raise ValueError(f"empty truncation range ({z_lo}, {z_hi})")
    return math.exp(sigma * sigma / 2) * (_phi(z_hi - sigma) - _phi(z_lo - sigma)) / denom


def _truncated_standard_normal(rng: np.random.Generator, z_lo: float,
                               z_hi: float, n: int) -> np.ndarray:
    chunks = []
    have = 0
    while have < n:
        draw = rng.standard_normal(max(n, 1024))
        good = draw[(draw > z_lo) & (draw < z_hi)]
        chunks.append(good)
        have += good.size
    return np.concatenate(chunks)[:n]


def lesion_population(counts: dict[int, int], image_size: float, seed: int,
                      mean_area_ratios: dict[int, float] | None = None,
                      sigma_log: float = DEFAULT_SIGMA_LOG,
                      z_ranges: dict[int, tuple[float, float]] | None = None,
                      min_side: float = 0.0) -> list[tuple[int, BBox]]:
    """Sample a lesion population with category-specific size statistics.

    Areas follow a truncated lognormal around each category's mean
    lesion-to-image area ratio; the scale is analytically corrected for
    the truncation so the expected ratio equals the configured mean.
    Aspect ratios come from {0.5, 1, 2} and positions are uniform within
    the image. min_side, when positive, clamps each side up to that many
    pixels (used by simulations that must keep lesions above a floor).

    All draws are relative to the image: the same seed and counts give
    the same population at every image_size, just scaled. Returns
    (category, box) pairs grouped by category in category order.
    """
    check_positive(image_size, "image_size")
    means = dict(DEFAULT_MEAN_AREA_RATIOS if mean_area_ratios is None
                 else mean_area_ratios)
    zr = dict(DEFAULT_Z_RANGES if z_ranges is None else z_ranges)
    out: list[tuple[int, BBox]] = []
    for c in CATEGORIES:
        n = int(counts.get(c, 0))
        if n < 0:
            raise ValueError(f"negative count for category {c}")
        if n == 0:
            continue
        z_lo, z_hi = zr[c]
        scale = means[c] / _truncated_mean_factor(sigma_log, z_lo, z_hi)
        rng = stream_rng(seed, "lesion", c)
        z = _truncated_standard_normal(rng, z_lo, z_hi, n)
        ratios = scale * np.exp(sigma_log * z)
        aspects = np.array(ASPECT_CHOICES)[rng.integers(0, len(ASPECT_CHOICES), n)]
        ux = rng.random(n)
        uy = rng.random(n)
        side_rel = np.sqrt(ratios)
        w_rel = side_rel * np.sqrt(aspects)
        h_rel = side_rel / np.sqrt(aspects)
        w = np.minimum(w_rel * image_size, image_size)
        h = np.minimum(h_rel * image_size, image_size)
        if min_side > 0:
            w = np.maximum(w, min(min_side, image_size))
            h = np.maximum(h, min(min_side, image_size))
        x = ux * (image_size - w)
        y = uy * (image_size - h)
        for i in range(n):
            out.append((c, BBox(float(x[i]), float(y[i]), float(w[i]), float(h[i]))))
    return out
