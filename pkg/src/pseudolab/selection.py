"""Pseudo-label selection: filter raw detections down to an accepted set.

A detection on a training image is promoted to a pseudo-label when its
score clears the round's confidence threshold and its box stays clear
(IoU below a small ceiling) of every annotation the image already has,
manual or previously accepted. Detections are processed in descending
score order and accepted ones immediately join the per-image exclusion
state, so near-duplicate detections of one lesion are suppressed within
a round as well.

The two-clause rule makes the accepted set monotone in the threshold:
raising it can only remove accepted labels, never add or swap them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .datasets import Annotation, DatasetSnapshot
from .errors import ConfigError, DatasetFormatError
from .geometry import BBox, iou
from .validation import CATEGORIES, check_category, check_unit_interval


@dataclass(frozen=True)
class Detection:
    """One raw detector output on one image. Scores are strictly inside
    (0, 1); a hard 0 or 1 is a detector protocol violation."""

    image_id: str
    box: BBox
    category: int
    score: float

    def __post_init__(self):
        if not isinstance(self.image_id, str) or not self.image_id:
            raise ValueError(f"image_id must be a non-empty string, got {self.image_id!r}")
        check_category(self.category)
        check_unit_interval(self.score, "score", open_low=True, open_high=True)


@dataclass(frozen=True)
class SelectionCriterion:
    """Acceptance rule parameters.

    p_threshold: minimum score, exclusive (score must be strictly above).
    lgt_iou_ceiling: maximum IoU, exclusive, against any existing
        annotation on the image regardless of category.
    dedup_iou: within one selection pass, a candidate overlapping an
        already accepted detection at or above this IoU is suppressed.
    category_specific: when true (default) the dedup rule compares only
        same-category pairs; when false it is purely spatial like the
        existing-annotation exclusion.
    """

    p_threshold: float = 0.3
    lgt_iou_ceiling: float = 0.05
    dedup_iou: float = 0.5
    category_specific: bool = True

    def __post_init__(self):
        check_unit_interval(self.p_threshold, "p_threshold", open_high=True)
        check_unit_interval(self.lgt_iou_ceiling, "lgt_iou_ceiling",
                            open_low=True, open_high=True)
        check_unit_interval(self.dedup_iou, "dedup_iou", open_low=True)
        if not isinstance(self.category_specific, bool):
            raise ValueError("category_specific must be a bool")


@dataclass(frozen=True)
class PseudoLabel:
    """An accepted detection, bound to its image and ready to merge."""

    image_id: str
    annotation: Annotation


def accept_one(detection: Detection, existing: Sequence[Annotation],
               criterion: SelectionCriterion) -> bool:
    """Test one detection against the image's current annotations.

    existing must hold every annotation already on the detection's image.
    True iff the score is strictly above the threshold and the box's IoU
    with every existing annotation is strictly below the exclusion
    ceiling (spatial, category-blind).
    """
    if detection.score <= criterion.p_threshold:
        return False
    return all(iou(detection.box, a.box) < criterion.lgt_iou_ceiling for a in existing)


def _ordered(detections: Iterable[Detection]) -> list[Detection]:
    # descending score; deterministic tie-break
    return sorted(detections,
                  key=lambda d: (-d.score, d.image_id, d.box.x, d.box.y, d.category))


def select_ugt(detections: Iterable[Detection], snapshot: DatasetSnapshot,
               criterion: SelectionCriterion,
               round_index: int | None = None) -> list[PseudoLabel]:
    """Greedy pseudo-label selection over a detection set.

    Detections are visited in descending score order (ties broken by
    image id and geometry). Each is accepted iff it passes accept_one
    against the image's annotations and does not overlap an already
    accepted detection at IoU >= dedup_iou (same category only, unless
    category_specific is false). Accepted detections become pseudo
    annotations carrying their score as confidence and round_index
    (default: the snapshot's round plus one).

    Raises DatasetFormatError when detections reference unknown images.
    """
    if round_index is None:
        round_index = snapshot.round_index + 1
    image_map = snapshot.image_map
    unknown = sorted({d.image_id for d in detections if d.image_id not in image_map})
    if unknown:
        shown = ", ".join(repr(i) for i in unknown[:10])
        more = f" (+{len(unknown) - 10} more)" if len(unknown) > 10 else ""
        raise DatasetFormatError(f"detections reference unknown image ids: {shown}{more}")

    existing: dict[str, list[BBox]] = {}
    accepted_boxes: dict[str, list[tuple[BBox, int]]] = {}
    out: list[PseudoLabel] = []
    for d in _ordered(detections):
        if d.score <= criterion.p_threshold:
            continue
        if d.image_id not in existing:
            existing[d.image_id] = [a.box for a in image_map[d.image_id].annotations]
            accepted_boxes[d.image_id] = []
        if any(iou(d.box, b) >= criterion.lgt_iou_ceiling for b in existing[d.image_id]):
            continue
        if any(iou(d.box, b) >= criterion.dedup_iou
               for b, cat in accepted_boxes[d.image_id]
               if not criterion.category_specific or cat == d.category):
            continue
        accepted_boxes[d.image_id].append((d.box, d.category))
        out.append(PseudoLabel(
            image_id=d.image_id,
            annotation=Annotation.pseudo(d.box, d.category, d.score, round_index)))
    return out


def sweep_thresholds(detections: Sequence[Detection], snapshot: DatasetSnapshot,
                     p_values: Sequence[float],
                     criterion: SelectionCriterion = SelectionCriterion()
                     ) -> list[tuple[float, dict[int, int]]]:
    """Accepted-count table over a threshold grid, from one shared
    detection list. Returns [(p, {category: count})] in grid order.
    p_values must be strictly ascending, each in [0, 1)."""
    values = list(p_values)
    if not values:
        raise ConfigError("threshold grid is empty")
    for v in values:
        check_unit_interval(v, "threshold", open_high=True)
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ConfigError(f"threshold grid must be strictly ascending, got {values}")
    rows = []
    for p in values:
        selected = select_ugt(detections, snapshot, replace(criterion, p_threshold=p))
        counts = {c: 0 for c in CATEGORIES}
        for pl in selected:
            counts[pl.annotation.category] += 1
        rows.append((p, counts))
    return rows


class PseudoLabelSelector(BaseEstimator):
    """Estimator wrapper around select_ugt.

    fit(X) binds the selector to a dataset snapshot (the images whose
    annotations form the exclusion sets); transform(detections) then
    returns the accepted pseudo-labels. round_index=None stamps accepted
    labels with the snapshot's round plus one.
    """

    def __init__(self, p_threshold: float = 0.3, lgt_iou_ceiling: float = 0.05,
                 dedup_iou: float = 0.5, category_specific: bool = True,
                 round_index: int | None = None):
        self.p_threshold = p_threshold
        self.lgt_iou_ceiling = lgt_iou_ceiling
        self.dedup_iou = dedup_iou
        self.category_specific = category_specific
        self.round_index = round_index

    def _criterion(self) -> SelectionCriterion:
        return SelectionCriterion(
            p_threshold=self.p_threshold, lgt_iou_ceiling=self.lgt_iou_ceiling,
            dedup_iou=self.dedup_iou, category_specific=self.category_specific)

    def fit(self, X: DatasetSnapshot, y=None) -> "PseudoLabelSelector":
        self._criterion()  # validate parameters eagerly
        self.snapshot_ = X
        return self

    def transform(self, X: Iterable[Detection]) -> list[PseudoLabel]:
        if not hasattr(self, "snapshot_"):
            raise NotFittedError("call fit with a dataset snapshot before transform")
        return select_ugt(X, self.snapshot_, self._criterion(),
                          round_index=self.round_index)


def save_detections(detections: Iterable[Detection], path) -> None:
    """Write detections as JSON lines: one object per detection with
    fields image_id, x, y, w, h, c, score. Deterministic byte output."""
    with open(path, "w", encoding="utf-8") as f:
        for d in detections:
            f.write(json.dumps(
                {"image_id": d.image_id, "x": d.box.x, "y": d.box.y,
                 "w": d.box.w, "h": d.box.h, "c": d.category, "score": d.score},
                separators=(",", ":")))
            f.write("\n")


def load_detections(path) -> list[Detection]:
    """Parse a JSON-lines detection file. Any malformed line (bad JSON,
    missing field, score outside (0,1), bad box) raises DatasetFormatError
    naming the offending line; blank lines are permitted."""
    out = []
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetFormatError(f"{path}:{n}: invalid JSON: {e}") from None
            if not isinstance(row, dict):
                raise DatasetFormatError(f"{path}:{n}: detection must be an object")
            try:
                box = BBox(row["x"], row["y"], row["w"], row["h"])
                out.append(Detection(image_id=row["image_id"], box=box,
                                     category=row["c"], score=row["score"]))
            except KeyError as e:
                raise DatasetFormatError(f"{path}:{n}: missing field {e}") from None
            except (ValueError, TypeError) as e:
                raise DatasetFormatError(f"{path}:{n}: {e}") from None
    return out
