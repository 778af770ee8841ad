"""Multi-round training orchestration.

Each round trains the detector on the current label union, runs it back
over the training images, selects new pseudo-labels above the round's
confidence threshold, and merges them in. The threshold rises every
round, so late rounds only admit high-confidence labels; the loop stops
once a round contributes at most m_stop new labels (the newly selected
set is still merged first) or when the round cap is reached.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .datasets import (
    LGT_EXCLUSION_IOU,
    DatasetSnapshot,
    ImageRecord,
    count_by_category,
    save_dataset,
)
from .errors import ConfigError, InvariantViolation
from .geometry import iou
from .metrics import EvalProtocol, SensitivityTable, sensitivity
from .selection import PseudoLabel, SelectionCriterion, save_detections, select_ugt
from .validation import CATEGORIES


@dataclass(frozen=True)
class RoundConfig:
    """Loop parameters.

    The threshold for round k (1-based) is p_initial + p_step * (k - 1);
    the schedule must stay below 1 through the last round. m_stop is the
    largest newly-selected count that ends the loop. A p_step of 0 keeps
    the threshold flat, leaving max_rounds as the only stopper.
    """

    p_initial: float = 0.3
    p_step: float = 0.1
    m_stop: int = 100
    max_rounds: int = 7
    criterion: SelectionCriterion = field(default_factory=SelectionCriterion)
    evaluate_each_round: bool = False
    eval_protocol: EvalProtocol = field(default_factory=EvalProtocol)

    def __post_init__(self):
        if not isinstance(self.max_rounds, int) or self.max_rounds < 1:
            raise ConfigError(f"max_rounds must be an int >= 1, got {self.max_rounds!r}")
        if not isinstance(self.m_stop, int) or self.m_stop < 0:
            raise ConfigError(f"m_stop must be an int >= 0, got {self.m_stop!r}")
        if not 0 <= self.p_initial < 1:
            raise ConfigError(f"p_initial must lie in [0, 1), got {self.p_initial!r}")
        if not self.p_step >= 0:
            raise ConfigError(f"p_step must be >= 0, got {self.p_step!r}")
        last = self.p_initial + self.p_step * (self.max_rounds - 1)
        if not last < 1:
            raise ConfigError(
                f"threshold schedule leaves (0, 1): round {self.max_rounds} "
                f"would use P = {last}")

    def threshold_for_round(self, round_index: int) -> float:
        return self.p_initial + self.p_step * (round_index - 1)


@dataclass(frozen=True)
class RoundState:
    """Everything recorded about one completed round."""

    round_index: int
    p_used: float
    x_selected: tuple[PseudoLabel, ...]
    l_x: int
    dstar_counts: dict[int, int]
    detector_tag: str
    eval_summary: SensitivityTable | None = None

    def __post_init__(self):
        if self.l_x != len(self.x_selected):
            raise ValueError(f"l_x {self.l_x} != |x_selected| {len(self.x_selected)}")

    def x_counts(self) -> dict[int, int]:
        counts = {c: 0 for c in CATEGORIES}
        for pl in self.x_selected:
            counts[pl.annotation.category] += 1
        return counts

    def to_json_dict(self) -> dict:
        d = {
            "round_index": self.round_index,
            "p_used": self.p_used,
            "l_x": self.l_x,
            "x_counts": {str(c): n for c, n in sorted(self.x_counts().items())},
            "dstar_counts": {str(c): n for c, n in sorted(self.dstar_counts.items())},
            "detector_tag": self.detector_tag,
        }
        d["eval"] = self.eval_summary.to_json_dict() if self.eval_summary else None
        return d


def merge_pseudo(snapshot: DatasetSnapshot, selected: Sequence[PseudoLabel],
                 exclusion_iou: float = LGT_EXCLUSION_IOU) -> DatasetSnapshot:
    """Append accepted pseudo-labels to their images; round_index advances.

    Every incoming label is re-checked against the exclusion rule that
    selection already enforced: overlap at or above exclusion_iou with
    any existing annotation raises InvariantViolation, since it means the
    selection stage is broken (merging the same selection twice trips it
    at IoU 1). Existing annotations are never touched.
    """
    by_image: dict[str, list[PseudoLabel]] = {}
    for pl in selected:
        if pl.image_id not in snapshot.image_map:
            raise InvariantViolation(f"pseudo-label references unknown image {pl.image_id!r}")
        by_image.setdefault(pl.image_id, []).append(pl)
    images = []
    for im in snapshot.images:
        incoming = by_image.get(im.image_id)
        if not incoming:
            images.append(im)
            continue
        for pl in incoming:
            for a in im.annotations:
                v = iou(pl.annotation.box, a.box)
                if v >= exclusion_iou:
                    raise InvariantViolation(
                        f"pseudo-label on image {im.image_id!r} overlaps an existing "
                        f"annotation at IoU {v:.3f} >= {exclusion_iou}")
        try:
            images.append(ImageRecord(
                image_id=im.image_id, width=im.width, height=im.height,
                annotations=im.annotations + tuple(pl.annotation for pl in incoming),
                hidden_truth=im.hidden_truth))
        except ValueError as e:
            raise InvariantViolation(f"merge produced an invalid image record: {e}") from None
    return DatasetSnapshot(images=tuple(images),
                           round_index=snapshot.round_index + 1,
                           split=snapshot.split)


def _write_round_artifacts(out_dir: Path, state: RoundState,
                           dstar: DatasetSnapshot, detections) -> None:
    round_dir = out_dir / "rounds" / str(state.round_index)
    round_dir.mkdir(parents=True, exist_ok=True)
    save_dataset(dstar, round_dir / "dataset.json")
    save_detections(detections, round_dir / "detections.jsonl")
    x_rows = [{"image_id": pl.image_id, **pl.annotation.to_json_dict()}
              for pl in state.x_selected]
    with open(round_dir / "x_selected.json", "w", encoding="utf-8") as f:
        json.dump(x_rows, f, separators=(",", ":"), sort_keys=True)
        f.write("\n")
    with open(round_dir / "state.json", "w", encoding="utf-8") as f:
        json.dump(state.to_json_dict(), f, separators=(",", ":"), sort_keys=True)
        f.write("\n")


def _execute_rounds(train_set: DatasetSnapshot, val_set: DatasetSnapshot | None,
                    detector, cfg: RoundConfig, out_dir=None, threads: int = 1
                    ) -> tuple[list[RoundState], DatasetSnapshot]:
    if val_set is not None:
        shared = {im.image_id for im in train_set.images} \
            & {im.image_id for im in val_set.images}
        if shared:
            raise ConfigError(
                f"train and validation sets share images: {sorted(shared)[:5]}")
    if out_dir is not None:
        out_dir = Path(out_dir)
    dstar = train_set
    states: list[RoundState] = []
    for k in range(1, cfg.max_rounds + 1):
        p_k = cfg.threshold_for_round(k)
        detector.fit(dstar)
        detections = detector.predict(dstar, threads=threads)
        criterion = replace(cfg.criterion, p_threshold=p_k)
        selected = select_ugt(detections, dstar, criterion, round_index=k)
        dstar = merge_pseudo(dstar, selected,
                             exclusion_iou=criterion.lgt_iou_ceiling)
        eval_summary = None
        if cfg.evaluate_each_round and val_set is not None:
            val_detections = detector.predict(val_set, threads=threads)
            eval_summary = sensitivity(val_detections, val_set, cfg.eval_protocol)
        state = RoundState(
            round_index=k, p_used=p_k, x_selected=tuple(selected),
            l_x=len(selected), dstar_counts=count_by_category(dstar),
            detector_tag=detector.artifact_tag_, eval_summary=eval_summary)
        if out_dir is not None:
            _write_round_artifacts(out_dir, state, dstar, detections)
        states.append(state)
        if len(selected) <= cfg.m_stop:
            break
    return states, dstar


def run_rounds(train_set: DatasetSnapshot, val_set: DatasetSnapshot | None,
               detector, cfg: RoundConfig, out_dir=None,
               threads: int = 1) -> list[RoundState]:
    """Run the full labeling loop; returns one RoundState per round.

    detector is any estimator with fit/predict and an artifact_tag_
    (SyntheticDetector or ExternalDetector). When out_dir is given,
    every round writes rounds/<k>/{dataset.json, detections.jsonl,
    x_selected.json, state.json} before the next round starts, so a
    failed run keeps its completed rounds on disk. Exported artifacts
    never include hidden truth.
    """
    states, _ = _execute_rounds(train_set, val_set, detector, cfg,
                                out_dir=out_dir, threads=threads)
    return states


class MultiRoundTrainer(BaseEstimator):
    """Estimator wrapper around the labeling loop.

    fit(X, y) takes the training snapshot as X and, optionally, the
    validation snapshot as y. After fitting, round_states_ holds the
    per-round log and final_snapshot_ the fully merged training set.
    """

    def __init__(self, detector=None, p_initial: float = 0.3, p_step: float = 0.1,
                 m_stop: int = 100, max_rounds: int = 7,
                 criterion: SelectionCriterion = SelectionCriterion(),
                 evaluate_each_round: bool = False,
                 eval_protocol: EvalProtocol = EvalProtocol(),
                 out_dir=None, threads: int = 1):
        self.detector = detector
        self.p_initial = p_initial
        self.p_step = p_step
        self.m_stop = m_stop
        self.max_rounds = max_rounds
        self.criterion = criterion
        self.evaluate_each_round = evaluate_each_round
        self.eval_protocol = eval_protocol
        self.out_dir = out_dir
        self.threads = threads

    def fit(self, X: DatasetSnapshot, y: DatasetSnapshot | None = None
            ) -> "MultiRoundTrainer":
        if self.detector is None:
            raise ConfigError("MultiRoundTrainer needs a detector estimator")
        cfg = RoundConfig(
            p_initial=self.p_initial, p_step=self.p_step, m_stop=self.m_stop,
            max_rounds=self.max_rounds, criterion=self.criterion,
            evaluate_each_round=self.evaluate_each_round,
            eval_protocol=self.eval_protocol)
        states, final = _execute_rounds(X, y, self.detector, cfg,
                                        out_dir=self.out_dir, threads=self.threads)
        self.round_states_ = states
        self.final_snapshot_ = final
        return self

    def transform(self, X: DatasetSnapshot) -> DatasetSnapshot:
        """Return the merged training snapshot produced by fit."""
        if not hasattr(self, "final_snapshot_"):
            raise NotFittedError("call fit before transform")
        return self.final_snapshot_
