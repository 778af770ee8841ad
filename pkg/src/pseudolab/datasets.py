"""Annotation data model and dataset persistence.

A dataset snapshot is a set of images, each carrying its visible
annotations (manual labels plus any merged pseudo-labels) and, in
simulation runs only, an optional hidden ground-truth list used by
oracle metrics. Snapshots are immutable; every round of the labeling
loop produces a new one.

Native file layout (UTF-8 JSON)::

    {"schema_version": 1,
     "images": [{"image_id": ..., "width": ..., "height": ...,
                 "annotations": [{"x","y","w","h","c","confidence","origin","round"?}, ...],
                 "hidden_truth": [...]?}, ...]}

``hidden_truth`` is written only when explicitly requested; it must never
reach files handed to external training processes.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Iterable

from .errors import DatasetFormatError
from .geometry import BBox, iou
from .validation import CATEGORIES, check_category, check_positive, check_unit_interval

SCHEMA_VERSION = 1

ORIGIN_MANUAL = "manual"
ORIGIN_PSEUDO = "pseudo"

SPLIT_TRAIN = "train"
SPLIT_VALIDATION = "validation"

# A merged pseudo-label may never overlap an existing annotation at or
# above this IoU; the selection stage guarantees it and the merge re-checks.
LGT_EXCLUSION_IOU = 0.05

_BOUNDS_TOL = 1e-6


@dataclass(frozen=True)
class Annotation:
    """One labeled box. Manual labels carry confidence exactly 1.0; pseudo
    labels carry the detector score in (0, 1) and the round that added them."""

    box: BBox
    category: int
    confidence: float = 1.0
    origin: str = ORIGIN_MANUAL
    round_index: int | None = None

    def __post_init__(self):
        check_category(self.category)
        if self.origin == ORIGIN_MANUAL:
            if self.confidence != 1.0:
                raise ValueError(f"manual annotations carry confidence 1.0, got {self.confidence!r}")
            if self.round_index is not None:
                raise ValueError("manual annotations carry no round index")
        elif self.origin == ORIGIN_PSEUDO:
            check_unit_interval(self.confidence, "confidence", open_low=True, open_high=True)
            if not isinstance(self.round_index, int) or self.round_index < 1:
                raise ValueError(f"pseudo annotations need round_index >= 1, got {self.round_index!r}")
        else:
            raise ValueError(f"origin must be {ORIGIN_MANUAL!r} or {ORIGIN_PSEUDO!r}, got {self.origin!r}")

    @staticmethod
    def manual(box: BBox, category: int) -> Annotation:
        return Annotation(box=box, category=category)

    @staticmethod
    def pseudo(box: BBox, category: int, confidence: float, round_index: int) -> Annotation:
        return Annotation(box=box, category=category, confidence=confidence,
                          origin=ORIGIN_PSEUDO, round_index=round_index)

    def to_json_dict(self) -> dict:
        d = {"x": self.box.x, "y": self.box.y, "w": self.box.w, "h": self.box.h,
             "c": self.category, "confidence": self.confidence, "origin": self.origin}
        if self.origin == ORIGIN_PSEUDO:
            d["round"] = self.round_index
        return d


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    width: float
    height: float
    annotations: tuple[Annotation, ...] = ()
    hidden_truth: tuple[Annotation, ...] | None = None

    def __post_init__(self):
        if not isinstance(self.image_id, str) or not self.image_id:
            raise ValueError(f"image_id must be a non-empty string, got {self.image_id!r}")
        check_positive(self.width, "width")
        check_positive(self.height, "height")
        object.__setattr__(self, "annotations", tuple(self.annotations))
        if self.hidden_truth is not None:
            object.__setattr__(self, "hidden_truth", tuple(self.hidden_truth))
        seen = set()
        for ann in self.annotations:
            self._check_bounds(ann)
            if ann in seen:
                raise ValueError(f"duplicate annotation on image {self.image_id!r}: {ann}")
            seen.add(ann)
        for ann in self.hidden_truth or ():
            self._check_bounds(ann)

    def _check_bounds(self, ann: Annotation) -> None:
        b = ann.box
        if b.x < -_BOUNDS_TOL or b.y < -_BOUNDS_TOL \
                or b.x + b.w > self.width + _BOUNDS_TOL or b.y + b.h > self.height + _BOUNDS_TOL:
            raise ValueError(
                f"annotation box {b} exceeds image {self.image_id!r} bounds "
                f"{self.width}x{self.height}")


@dataclass(frozen=True)
class DatasetSnapshot:
    images: tuple[ImageRecord, ...] = ()
    round_index: int = 0
    split: str = SPLIT_TRAIN

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        if not isinstance(self.round_index, int) or self.round_index < 0:
            raise ValueError(f"round_index must be an int >= 0, got {self.round_index!r}")
        if self.split not in (SPLIT_TRAIN, SPLIT_VALIDATION):
            raise ValueError(f"split must be train or validation, got {self.split!r}")
        ids = [im.image_id for im in self.images]
        if len(set(ids)) != len(ids):
            raise ValueError("image_id values must be unique within a snapshot")

    @cached_property
    def image_map(self) -> dict[str, ImageRecord]:
        return {im.image_id: im for im in self.images}

    def has_hidden_truth(self) -> bool:
        return any(im.hidden_truth is not None for im in self.images)


@dataclass(frozen=True)
class CropWindow:
    """Fixed crop applied identically to every image: keep the rectangle
    starting at (left, top) of size new_width x new_height."""

    left: float
    top: float
    new_width: float
    new_height: float

    def __post_init__(self):
        if self.left < 0 or self.top < 0:
            raise ValueError("crop offsets must be >= 0")
        check_positive(self.new_width, "new_width")
        check_positive(self.new_height, "new_height")


@dataclass
class LoadReport:
    accepted: int = 0
    clamped: int = 0
    rejected_by_reason: dict[str, int] = field(default_factory=dict)

    def reject(self, reason: str) -> None:
        self.rejected_by_reason[reason] = self.rejected_by_reason.get(reason, 0) + 1

    @property
    def rejected(self) -> int:
        return sum(self.rejected_by_reason.values())

    def to_json_dict(self) -> dict:
        return {"accepted": self.accepted, "clamped": self.clamped,
                "rejected_by_reason": dict(sorted(self.rejected_by_reason.items()))}


@dataclass
class CropReport:
    clamped: int = 0
    dropped: int = 0

    def to_json_dict(self) -> dict:
        return {"clamped": self.clamped, "dropped": self.dropped}


def _clamp_box(x, y, w, h, width, height):
    """Clip a raw box to image bounds. Returns (box or None, was_clamped)."""
    x2, y2 = x + w, y + h
    cx, cy = max(x, 0.0), max(y, 0.0)
    cx2, cy2 = min(x2, width), min(y2, height)
    if cx2 - cx <= 0 or cy2 - cy <= 0:
        return None, False
    clamped = (cx, cy, cx2, cy2) != (x, y, x2, y2)
    return BBox(cx, cy, cx2 - cx, cy2 - cy), clamped


def _annotation_from_fields(x, y, w, h, c, confidence, origin, round_index,
                            width, height, report: LoadReport) -> Annotation | None:
    """Validate one raw annotation row, clamping the box. None means rejected."""
    for v in (x, y, w, h):
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            report.reject("non_numeric_box")
            return None
    if not isinstance(c, int) or isinstance(c, bool):
        report.reject("non_integer_category")
        return None
    if c not in CATEGORIES:
        report.reject("category_out_of_range")
        return None
    if w <= 0 or h <= 0:
        report.reject("degenerate_box")
        return None
    box, clamped = _clamp_box(float(x), float(y), float(w), float(h), width, height)
    if box is None:
        report.reject("outside_image")
        return None
    if origin == ORIGIN_MANUAL:
        if confidence != 1.0:
            report.reject("manual_confidence_not_one")
            return None
        if round_index is not None:
            report.reject("manual_with_round")
            return None
    elif origin == ORIGIN_PSEUDO:
        if not isinstance(confidence, (int, float)) or not 0 < confidence < 1:
            report.reject("pseudo_confidence_out_of_range")
            return None
        if not isinstance(round_index, int) or round_index < 1:
            report.reject("pseudo_round_invalid")
            return None
    else:
        report.reject("unknown_origin")
        return None
    if clamped:
        report.clamped += 1
    return Annotation(box=box, category=c, confidence=float(confidence),
                      origin=origin, round_index=round_index)


def _parse_native(doc, report: LoadReport) -> list[ImageRecord]:
    if not isinstance(doc, dict):
        raise DatasetFormatError("top level must be a JSON object")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise DatasetFormatError(f"unsupported schema_version {doc.get('schema_version')!r}")
    raw_images = doc.get("images")
    if not isinstance(raw_images, list):
        raise DatasetFormatError("'images' must be a list")
    records = []
    for i, im in enumerate(raw_images):
        if not isinstance(im, dict):
            raise DatasetFormatError(f"images[{i}] must be an object")
        try:
            image_id = im["image_id"]
            width, height = im["width"], im["height"]
        except KeyError as e:
            raise DatasetFormatError(f"images[{i}] missing field {e}") from None
        if not isinstance(image_id, str):
            raise DatasetFormatError(f"images[{i}].image_id must be a string")
        if not isinstance(width, (int, float)) or not isinstance(height, (int, float)) \
                or width <= 0 or height <= 0:
            raise DatasetFormatError(f"images[{i}] ({image_id!r}) has invalid dimensions")
        anns = _parse_annotation_rows(im.get("annotations", ()), image_id, i,
                                      width, height, report)
        hidden = None
        if "hidden_truth" in im:
            hidden_report = LoadReport()  # hidden rows rejected silently would hide bugs
            hidden = _parse_annotation_rows(im["hidden_truth"], image_id, i,
                                            width, height, hidden_report)
            if hidden_report.rejected:
                raise DatasetFormatError(
                    f"images[{i}] ({image_id!r}): invalid hidden_truth rows "
                    f"{hidden_report.rejected_by_reason}")
        anns = _drop_pseudo_overlaps(anns, report)
        records.append(ImageRecord(image_id=image_id, width=width, height=height,
                                   annotations=anns, hidden_truth=hidden))
    return records


def _parse_annotation_rows(rows, image_id, idx, width, height, report) -> list[Annotation]:
    if not isinstance(rows, (list, tuple)):
        raise DatasetFormatError(f"images[{idx}] ({image_id!r}): annotations must be a list")
    out = []
    for j, row in enumerate(rows):
        if not isinstance(row, dict):
            raise DatasetFormatError(f"images[{idx}].annotations[{j}] must be an object")
        try:
            ann = _annotation_from_fields(
                row.get("x"), row.get("y"), row.get("w"), row.get("h"), row.get("c"),
                row.get("confidence", 1.0), row.get("origin", ORIGIN_MANUAL),
                row.get("round"), width, height, report)
        except ValueError as e:
            raise DatasetFormatError(f"images[{idx}].annotations[{j}]: {e}") from None
        if ann is not None:
            if ann in out:
                report.reject("duplicate_annotation")
            else:
                out.append(ann)
                report.accepted += 1
    return out


def _drop_pseudo_overlaps(anns: list[Annotation], report: LoadReport) -> list[Annotation]:
    """Enforce the merge invariant on ingested data: a pseudo label may not
    sit on an existing manual label. Offending pseudo rows are rejected."""
    manual_boxes = [a.box for a in anns if a.origin == ORIGIN_MANUAL]
    kept = []
    for a in anns:
        if a.origin == ORIGIN_PSEUDO and any(iou(a.box, mb) >= LGT_EXCLUSION_IOU
                                             for mb in manual_boxes):
            report.reject("pseudo_overlaps_manual")
            report.accepted -= 1
        else:
            kept.append(a)
    return kept


def _parse_coco_like(doc, report: LoadReport) -> list[ImageRecord]:
    if not isinstance(doc, dict):
        raise DatasetFormatError("top level must be a JSON object")
    for key in ("images", "annotations"):
        if not isinstance(doc.get(key), list):
            raise DatasetFormatError(f"'{key}' must be a list")
    dims: dict = {}
    order: list = []
    for i, im in enumerate(doc["images"]):
        if not isinstance(im, dict) or "id" not in im:
            raise DatasetFormatError(f"images[{i}] must be an object with an 'id'")
        width, height = im.get("width"), im.get("height")
        if not isinstance(width, (int, float)) or not isinstance(height, (int, float)) \
                or width <= 0 or height <= 0:
            raise DatasetFormatError(f"images[{i}] (id={im['id']!r}) has invalid dimensions")
        if im["id"] in dims:
            raise DatasetFormatError(f"duplicate image id {im['id']!r}")
        dims[im["id"]] = (width, height)
        order.append(im["id"])
    per_image: dict = {iid: [] for iid in order}
    for j, row in enumerate(doc["annotations"]):
        if not isinstance(row, dict):
            raise DatasetFormatError(f"annotations[{j}] must be an object")
        iid = row.get("image_id")
        if iid not in dims:
            report.reject("unknown_image_id")
            continue
        bbox = row.get("bbox")
        if not isinstance(bbox, (list, tuple)) or len(bbox) != 4:
            report.reject("malformed_bbox")
            continue
        width, height = dims[iid]
        ann = _annotation_from_fields(bbox[0], bbox[1], bbox[2], bbox[3],
                                      row.get("category_id"), 1.0, ORIGIN_MANUAL, None,
                                      width, height, report)
        if ann is not None:
            if ann in per_image[iid]:
                report.reject("duplicate_annotation")
            else:
                per_image[iid].append(ann)
                report.accepted += 1
    return [ImageRecord(image_id=str(iid), width=dims[iid][0], height=dims[iid][1],
                        annotations=per_image[iid])
            for iid in order]


def load_dataset(path, format: str = "native", *, round_index: int = 0,
                 split: str = SPLIT_TRAIN) -> tuple[DatasetSnapshot, LoadReport]:
    """Load a dataset file.

    format is "native" for the toolkit's own layout or "coco" for a
    COCO-style {images, annotations} file. Boxes are clamped to image
    bounds; rows that cannot be repaired (bad category, degenerate or
    fully outside box, invalid confidence) are rejected and counted in
    the returned report. round_index and split are runtime metadata not
    stored in the file.

    Returns (snapshot, report). Raises DatasetFormatError on a file that
    cannot be parsed at all, and OSError on I/O failure.
    """
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{path}: invalid JSON: {e}") from None
    report = LoadReport()
    try:
        if format == "native":
            records = _parse_native(doc, report)
        elif format == "coco":
            records = _parse_coco_like(doc, report)
        else:
            raise ValueError(f"unknown dataset format {format!r}")
        snapshot = DatasetSnapshot(images=tuple(records), round_index=round_index, split=split)
    except DatasetFormatError as e:
        raise DatasetFormatError(f"{path}: {e}") from None
    return snapshot, report


def save_dataset(snapshot: DatasetSnapshot, path, *, include_hidden: bool = False) -> None:
    """Write a snapshot in the native layout.

    hidden_truth is serialized only when include_hidden is set; anything
    exported for external training must leave it out. Output bytes are
    deterministic for a given snapshot.
    """
    doc = {"schema_version": SCHEMA_VERSION, "images": []}
    for im in snapshot.images:
        entry = {"image_id": im.image_id, "width": im.width, "height": im.height,
                 "annotations": [a.to_json_dict() for a in im.annotations]}
        if include_hidden and im.hidden_truth is not None:
            entry["hidden_truth"] = [a.to_json_dict() for a in im.hidden_truth]
        doc["images"].append(entry)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, separators=(",", ":"))
        f.write("\n")


def split_dataset(snapshot: DatasetSnapshot, ratio: float, seed: int,
                  group_of: Callable[[str], object] | None = None
                  ) -> tuple[DatasetSnapshot, DatasetSnapshot]:
    """Deterministically split a snapshot into (train, validation) by image.

    ratio is the train share. Splitting is always at image granularity so
    no image contributes to both sides; if group_of is given, images
    mapping to the same key travel together (e.g. a patient identifier).
    """
    check_unit_interval(ratio, "ratio", open_low=True, open_high=True)
    n = len(snapshot.images)
    if n < 2:
        raise ValueError("need at least 2 images to split")
    n_train = min(max(int(round(n * ratio)), 1), n - 1)
    rng = random.Random(seed)
    if group_of is None:
        order = list(range(n))
        rng.shuffle(order)
        train_idx = set(order[:n_train])
    else:
        groups: dict = {}
        for i, im in enumerate(snapshot.images):
            groups.setdefault(group_of(im.image_id), []).append(i)
        keys = sorted(groups, key=repr)
        rng.shuffle(keys)
        train_idx = set()
        for k in keys:
            if len(train_idx) >= n_train:
                break
            train_idx.update(groups[k])
    train = tuple(im for i, im in enumerate(snapshot.images) if i in train_idx)
    val = tuple(im for i, im in enumerate(snapshot.images) if i not in train_idx)
    if not train or not val:
        raise ValueError("split produced an empty side; adjust ratio or grouping")
    return (DatasetSnapshot(images=train, round_index=snapshot.round_index, split=SPLIT_TRAIN),
            DatasetSnapshot(images=val, round_index=snapshot.round_index, split=SPLIT_VALIDATION))


def _crop_annotations(anns: Iterable[Annotation], crop: CropWindow,
                      report: CropReport) -> list[Annotation]:
    out = []
    for ann in anns:
        b = ann.box
        box, clamped = _clamp_box(b.x - crop.left, b.y - crop.top, b.w, b.h,
                                  crop.new_width, crop.new_height)
        if box is None:
            report.dropped += 1
            continue
        if clamped:
            report.clamped += 1
        out.append(replace(ann, box=box))
    return out


def apply_crop_transform(snapshot: DatasetSnapshot, crop: CropWindow
                         ) -> tuple[DatasetSnapshot, CropReport]:
    """Apply one fixed crop window to every image.

    Box coordinates shift by (-left, -top); boxes partially outside the
    window are clamped, boxes fully outside are dropped, and both counts
    are reported. hidden_truth entries are transformed the same way.
    """
    report = CropReport()
    records = []
    for im in snapshot.images:
        if crop.left + crop.new_width > im.width + _BOUNDS_TOL \
                or crop.top + crop.new_height > im.height + _BOUNDS_TOL:
            raise ValueError(
                f"crop window exceeds image {im.image_id!r} ({im.width}x{im.height})")
        hidden = None
        if im.hidden_truth is not None:
            hidden = _crop_annotations(im.hidden_truth, crop, report)
        records.append(ImageRecord(
            image_id=im.image_id, width=crop.new_width, height=crop.new_height,
            annotations=_crop_annotations(im.annotations, crop, report),
            hidden_truth=hidden))
    return DatasetSnapshot(images=tuple(records), round_index=snapshot.round_index,
                           split=snapshot.split), report


def count_by_category(snapshot: DatasetSnapshot, origin: str | None = None) -> dict[int, int]:
    """Per-category annotation counts; all four categories always present."""
    counts = {c: 0 for c in CATEGORIES}
    for im in snapshot.images:
        for ann in im.annotations:
            if origin is None or ann.origin == origin:
                counts[ann.category] += 1
    return counts
