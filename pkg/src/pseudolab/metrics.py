"""Sensitivity evaluation under the center-focus match criterion.

Small lesions make the usual IoU-0.5 true-positive rule too harsh, so a
detection counts as positive when it overlaps the ground-truth box at
IoU above a low floor and its rectangle contains the ground-truth
center. Sensitivity (per-category recall) is the headline metric since
partially labeled data makes precision unknowable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .datasets import Annotation, DatasetSnapshot
from .errors import ConfigError
from .geometry import CfParams, cf_match, iou
from .selection import Detection, PseudoLabel
from .validation import CATEGORIES, check_unit_interval


@dataclass(frozen=True)
class EvalProtocol:
    """Fixed evaluation protocol: drop detections scoring below
    score_floor (inclusive keep), keep at most max_dets_per_image by
    descending score, then match greedily."""

    score_floor: float = 0.1
    max_dets_per_image: int = 100
    cf: CfParams = field(default_factory=CfParams)

    def __post_init__(self):
        check_unit_interval(self.score_floor, "score_floor", open_high=True)
        if not isinstance(self.max_dets_per_image, int) or self.max_dets_per_image < 1:
            raise ValueError(
                f"max_dets_per_image must be an int >= 1, got {self.max_dets_per_image!r}")


@dataclass(frozen=True)
class CategoryStats:
    tp: int
    fn: int

    @property
    def sensitivity(self) -> float | None:
        total = self.tp + self.fn
        return self.tp / total if total else None


@dataclass(frozen=True)
class SensitivityTable:
    per_category: dict[int, CategoryStats]
    protocol: EvalProtocol

    def to_json_dict(self) -> dict:
        out = {}
        for c in CATEGORIES:
            s = self.per_category[c]
            out[str(c)] = {"tp": s.tp, "fn": s.fn, "sensitivity": s.sensitivity}
        return out


def _eligible(detections: Sequence[Detection], protocol: EvalProtocol) -> list[Detection]:
    kept = [d for d in detections if d.score >= protocol.score_floor]
    kept.sort(key=lambda d: (-d.score, d.box.x, d.box.y, d.category))
    return kept[:protocol.max_dets_per_image]


def match_image(detections: Sequence[Detection], gts: Sequence[Annotation],
                protocol: EvalProtocol = EvalProtocol()
                ) -> tuple[dict[int, int], dict[int, int], list[tuple[int, int]]]:
    """Greedy one-to-one matching on a single image.

    Detections surviving the protocol filter are visited in descending
    score order; each claims the still-unmatched same-category ground
    truth it center-focus-matches with the highest IoU, if any. Returns
    (tp per category, fn per category, matched (detection index, gt
    index) pairs) with indices into the argument sequences.
    """
    tp = {c: 0 for c in CATEGORIES}
    fn = {c: 0 for c in CATEGORIES}
    order = _eligible(detections, protocol)
    index_of = {id(d): i for i, d in enumerate(detections)}
    taken = [False] * len(gts)
    pairs = []
    for d in order:
        best_j, best_iou = -1, -1.0
        for j, g in enumerate(gts):
            if taken[j] or g.category != d.category:
                continue
            if not cf_match(d.box, g.box, protocol.cf):
                continue
            v = iou(d.box, g.box)
            if v > best_iou:
                best_j, best_iou = j, v
        if best_j >= 0:
            taken[best_j] = True
            tp[d.category] += 1
            pairs.append((index_of[id(d)], best_j))
    for j, g in enumerate(gts):
        if not taken[j]:
            fn[g.category] += 1
    return tp, fn, pairs


def sensitivity(detections: Sequence[Detection], snapshot: DatasetSnapshot,
                protocol: EvalProtocol = EvalProtocol()) -> SensitivityTable:
    """Aggregate match_image over a snapshot, per category.

    Detections are grouped by image id; ones referencing images absent
    from the snapshot are ignored. Ground truth is the snapshot's
    annotation set as given; the caller decides which snapshot (and
    therefore which labels) to measure against.
    """
    by_image: dict[str, list[Detection]] = {}
    for d in detections:
        by_image.setdefault(d.image_id, []).append(d)
    tp = {c: 0 for c in CATEGORIES}
    fn = {c: 0 for c in CATEGORIES}
    for im in snapshot.images:
        t, f, _ = match_image(by_image.get(im.image_id, ()), im.annotations, protocol)
        for c in CATEGORIES:
            tp[c] += t[c]
            fn[c] += f[c]
    return SensitivityTable(
        per_category={c: CategoryStats(tp=tp[c], fn=fn[c]) for c in CATEGORIES},
        protocol=protocol)


def ugt_precision_oracle(selected: Sequence[PseudoLabel], snapshot: DatasetSnapshot,
                         cf: CfParams = CfParams()) -> float:
    """Fraction of selected pseudo-labels that hit a real unlabeled lesion.

    Only possible on simulation datasets, where each image carries a
    hidden full ground truth: a pseudo-label counts as correct when it
    center-focus-matches a same-category hidden lesion that no manual
    annotation on the image already covers. Returns 0.0 for an empty
    selection. Raises ConfigError when the snapshot has no hidden truth.
    """
    if not snapshot.has_hidden_truth():
        raise ConfigError(
            "precision oracle requires hidden truth; only simulation datasets carry it")
    if not selected:
        return 0.0
    unlabeled: dict[str, list[Annotation]] = {}
    for im in snapshot.images:
        manual = [a for a in im.annotations if a.origin == "manual"]
        unlabeled[im.image_id] = [
            h for h in im.hidden_truth or ()
            if not any(a.category == h.category and cf_match(a.box, h.box, cf)
                       for a in manual)]
    hits = 0
    for pl in selected:
        if pl.image_id not in unlabeled:
            raise ConfigError(f"pseudo-label references unknown image {pl.image_id!r}")
        ann = pl.annotation
        if any(h.category == ann.category and cf_match(ann.box, h.box, cf)
               for h in unlabeled[pl.image_id]):
            hits += 1
    return hits / len(selected)
