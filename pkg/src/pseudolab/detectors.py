"""Detector boundary: a seeded synthetic detector and a subprocess adapter.

The synthetic detector is a noisy oracle over each image's hidden
ground truth. Its per-category recall rises logarithmically with the
number of genuine training annotations, so merging correct pseudo-labels
makes the next round's model better, mirroring how a real detector
responds to more labels. All randomness is drawn from named per-image
substreams of a counter-based PRNG, which makes inference a pure
function of (seed, trained-state tag, image id): results are identical
across runs, thread counts, and image orderings.

Stream layout (load-bearing for reproducibility):
  - true-positive stream, keyed (seed, "tp", image_id): per-lesion
    inclusion draws, scores, and box jitter. Independent of the trained
    state, so a lesion recalled at recall r stays recalled at any
    recall above r; the detection set grows monotonically as training
    counts grow (common random numbers across rounds).
  - false-positive stream, keyed (seed, "fp", artifact_tag, image_id):
    fresh spurious boxes for each trained state, modeling the new
    mistakes a newly trained model makes.

The external adapter shells out to a user-supplied command implementing
  <cmd> train --data <dataset.json> --out <dir>
  <cmd> infer --data <dataset.json> --out <detections.jsonl>
with exit 0 on success. Exported dataset files never include hidden
ground truth.
"""

from __future__ import annotations

import hashlib
import math
import os
import shlex
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .datasets import DatasetSnapshot, ImageRecord, save_dataset
from .errors import (ConfigError, DatasetFormatError, DetectorError,
                     DetectorProtocolError)
from .geometry import BBox, CfParams
from .selection import Detection, load_detections
from .streams import stream_rng
from .validation import CATEGORIES

_SCORE_EPS = 1e-9


def _boxes_array(annotations) -> np.ndarray:
    return np.array([[a.box.x, a.box.y, a.box.w, a.box.h] for a in annotations],
                    dtype=np.float64).reshape(len(annotations), 4)


def _cf_match_any(ann_boxes: np.ndarray, ann_cats: np.ndarray,
                  gt_boxes: np.ndarray, gt_cats: np.ndarray,
                  cf: CfParams) -> np.ndarray:
    """For each annotation row, whether it center-focus-matches any
    same-category ground-truth row. Vectorized twin of geometry.cf_match."""
    if len(ann_boxes) == 0 or len(gt_boxes) == 0:
        return np.zeros(len(ann_boxes), dtype=bool)
    ax1, ay1 = ann_boxes[:, 0:1], ann_boxes[:, 1:2]
    ax2, ay2 = ax1 + ann_boxes[:, 2:3], ay1 + ann_boxes[:, 3:4]
    gx1, gy1 = gt_boxes[None, :, 0], gt_boxes[None, :, 1]
    gx2, gy2 = gx1 + gt_boxes[None, :, 2], gy1 + gt_boxes[None, :, 3]
    iw = np.minimum(ax2, gx2) - np.maximum(ax1, gx1)
    ih = np.minimum(ay2, gy2) - np.maximum(ay1, gy1)
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = (ann_boxes[:, 2:3] * ann_boxes[:, 3:4]
             + (gt_boxes[:, 2] * gt_boxes[:, 3])[None, :] - inter)
    iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    cx, cy = gx1 + gt_boxes[None, :, 2] / 2, gy1 + gt_boxes[None, :, 3] / 2
    if cf.boundary_inclusive:
        contains = (ax1 <= cx) & (cx <= ax2) & (ay1 <= cy) & (cy <= ay2)
    else:
        contains = (ax1 < cx) & (cx < ax2) & (ay1 < cy) & (cy < ay2)
    match = (iou > cf.iou_floor) & contains & (ann_cats[:, None] == gt_cats[None, :])
    return match.any(axis=1)


def effective_training_counts(snapshot: DatasetSnapshot,
                              cf: CfParams = CfParams()) -> dict[int, int]:
    """Per-category count of training annotations that mark real lesions.

    On images carrying hidden ground truth, an annotation is counted
    only when it center-focus-matches a same-category hidden lesion, so
    spurious pseudo-labels do not inflate the count. Images without
    hidden truth fall back to counting every annotation.
    """
    counts = {c: 0 for c in CATEGORIES}
    for im in snapshot.images:
        if not im.annotations:
            continue
        if im.hidden_truth is None:
            for a in im.annotations:
                counts[a.category] += 1
            continue
        ann_boxes = _boxes_array(im.annotations)
        ann_cats = np.array([a.category for a in im.annotations])
        gt_boxes = _boxes_array(im.hidden_truth)
        gt_cats = np.array([a.category for a in im.hidden_truth])
        good = _cf_match_any(ann_boxes, ann_cats, gt_boxes, gt_cats, cf)
        for c, g in zip(ann_cats, good):
            if g:
                counts[int(c)] += 1
    return counts


class SyntheticDetector(BaseEstimator):
    """Seeded stand-in for a trainable lesion detector.

    fit() records how many genuine annotations per category the training
    snapshot provides and derives a per-category recall
        recall_c = clip(recall_base + recall_gain * log1p(count_c), 0, 1).
    predict() then emits, per image, each hidden-truth lesion with
    probability recall_c (score drawn from a Beta(tp_score_alpha,
    tp_score_beta), box jittered), plus Poisson(fp_rate) small false
    positives with Beta(fp_score_alpha, fp_score_beta) scores. Output is
    deterministic given the construction parameters and the fitted state.

    localization_jitter is the std in pixels of the center displacement;
    box sides get lognormal noise scaled so the expected edge shift is
    about the same pixel amount. fp_size_range bounds the false-positive
    box side (log-uniform draw).
    """

    def __init__(self, seed: int = 0, recall_base: float = 0.5,
                 recall_gain: float = 0.0, tp_score_alpha: float = 8.0,
                 tp_score_beta: float = 2.0, fp_rate: float = 0.0,
                 fp_score_alpha: float = 2.0, fp_score_beta: float = 5.0,
                 localization_jitter: float = 0.0,
                 fp_size_range: tuple[float, float] = (3.0, 6.0)):
        self.seed = seed
        self.recall_base = recall_base
        self.recall_gain = recall_gain
        self.tp_score_alpha = tp_score_alpha
        self.tp_score_beta = tp_score_beta
        self.fp_rate = fp_rate
        self.fp_score_alpha = fp_score_alpha
        self.fp_score_beta = fp_score_beta
        self.localization_jitter = localization_jitter
        self.fp_size_range = fp_size_range

    def _validate_params(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError(f"seed must be an int, got {self.seed!r}")
        for name in ("recall_gain", "fp_rate", "localization_jitter"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not math.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be a finite number >= 0, got {v!r}")
        if not isinstance(self.recall_base, (int, float)) \
                or not math.isfinite(self.recall_base):
            raise ConfigError(f"recall_base must be finite, got {self.recall_base!r}")
        for name in ("tp_score_alpha", "tp_score_beta",
                     "fp_score_alpha", "fp_score_beta"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not v > 0:
                raise ConfigError(f"{name} must be > 0, got {v!r}")
        lo, hi = self.fp_size_range
        if not 0 < lo <= hi:
            raise ConfigError(f"fp_size_range must satisfy 0 < lo <= hi, got {self.fp_size_range!r}")

    def fit(self, X: DatasetSnapshot, y=None) -> "SyntheticDetector":
        """Record training counts and derive per-category recall."""
        self._validate_params()
        self.category_counts_ = effective_training_counts(X)
        self.recall_ = {
            c: float(np.clip(self.recall_base
                             + self.recall_gain * math.log1p(self.category_counts_[c]),
                             0.0, 1.0))
            for c in CATEGORIES}
        param_tag = repr(sorted(self.get_params().items()))
        self.artifact_tag_ = hashlib.blake2b(
            f"{param_tag}|{sorted(self.category_counts_.items())}".encode(),
            digest_size=16).hexdigest()
        return self

    def _check_fitted(self):
        if not hasattr(self, "artifact_tag_"):
            raise NotFittedError("detector must be fit before predict")

    def _predict_image(self, im: ImageRecord) -> list[Detection]:
        out: list[Detection] = []
        jitter = self.localization_jitter
        hidden = im.hidden_truth or ()
        if hidden:
            rng = stream_rng(self.seed, "tp", im.image_id)
            n = len(hidden)
            include = rng.random(n)
            scores = rng.beta(self.tp_score_alpha, self.tp_score_beta, n)
            noise = rng.standard_normal((n, 4))
            for i, lesion in enumerate(hidden):
                if include[i] >= self.recall_[lesion.category]:
                    continue
                b = lesion.box
                if jitter > 0:
                    cx = b.x + b.w / 2 + noise[i, 0] * jitter
                    cy = b.y + b.h / 2 + noise[i, 1] * jitter
                    w = b.w * math.exp(noise[i, 2] * jitter / b.w)
                    h = b.h * math.exp(noise[i, 3] * jitter / b.h)
                else:
                    cx, cy, w, h = b.x + b.w / 2, b.y + b.h / 2, b.w, b.h
                det = self._clamped_detection(im, cx, cy, w, h,
                                              lesion.category, scores[i])
                if det is not None:
                    out.append(det)
        if self.fp_rate > 0:
            rng = stream_rng(self.seed, "fp", self.artifact_tag_, im.image_id)
            n_fp = int(rng.poisson(self.fp_rate))
            if n_fp:
                lo, hi = self.fp_size_range
                sides = np.exp(rng.uniform(math.log(lo), math.log(hi), n_fp))
                aspects = np.array([0.5, 1.0, 2.0])[rng.integers(0, 3, n_fp)]
                cxs = rng.uniform(0, im.width, n_fp)
                cys = rng.uniform(0, im.height, n_fp)
                cats = [int(c) for c in
                        np.array(CATEGORIES)[rng.integers(0, len(CATEGORIES), n_fp)]]
                scores = rng.beta(self.fp_score_alpha, self.fp_score_beta, n_fp)
                for i in range(n_fp):
                    w = sides[i] * math.sqrt(aspects[i])
                    h = sides[i] / math.sqrt(aspects[i])
                    det = self._clamped_detection(im, cxs[i], cys[i], w, h,
                                                  cats[i], scores[i])
                    if det is not None:
                        out.append(det)
        return out

    def _clamped_detection(self, im: ImageRecord, cx: float, cy: float,
                           w: float, h: float, category: int,
                           score: float) -> Detection | None:
        x1 = max(cx - w / 2, 0.0)
        y1 = max(cy - h / 2, 0.0)
        x2 = min(cx + w / 2, im.width)
        y2 = min(cy + h / 2, im.height)
        if x2 - x1 <= 0 or y2 - y1 <= 0:
            return None
        s = float(min(max(score, _SCORE_EPS), 1.0 - _SCORE_EPS))
        return Detection(image_id=im.image_id,
                         box=BBox(x1, y1, x2 - x1, y2 - y1),
                         category=category, score=s)

    def predict(self, X: DatasetSnapshot, threads: int = 1) -> list[Detection]:
        """Run inference on every image. Per-image substreams make the
        result independent of threads and of image order."""
        self._check_fitted()
        if threads <= 1:
            per_image = [self._predict_image(im) for im in X.images]
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                per_image = list(pool.map(self._predict_image, X.images))
        return [d for dets in per_image for d in dets]


def _digest_tree(root: Path) -> str:
    h = hashlib.blake2b(digest_size=16)
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class ExternalDetector(BaseEstimator):
    """Adapter for a real detector driven through a subprocess protocol.

    command is the executable plus fixed leading arguments (string or
    argv list). Each fit() writes the training snapshot (hidden truth
    withheld) and invokes `<command> train --data <file> --out <dir>`;
    predict() invokes `<command> infer --data <file> --out <file.jsonl>`
    and parses the detections. The subprocess environment contains PATH
    plus env_allowlist entries only.
    """

    def __init__(self, command, workdir: str | None = None,
                 env_allowlist: Sequence[str] = (), timeout: float = 3600.0):
        self.command = command
        self.workdir = workdir
        self.env_allowlist = env_allowlist
        self.timeout = timeout

    def _argv(self) -> list[str]:
        if isinstance(self.command, str):
            return shlex.split(self.command)
        return [str(c) for c in self.command]

    def _env(self) -> dict[str, str]:
        env = {}
        for k in ("PATH", *self.env_allowlist):
            if k in os.environ:
                env[k] = os.environ[k]
        return env

    def _run(self, args: list[str]) -> None:
        argv = self._argv() + args
        try:
            proc = subprocess.run(
                argv, cwd=self.workdir, env=self._env(), timeout=self.timeout,
                capture_output=True, text=True)
        except subprocess.TimeoutExpired:
            raise DetectorError(
                f"detector command timed out after {self.timeout}s: {argv}") from None
        except OSError as e:
            raise DetectorError(f"cannot run detector command {argv}: {e}") from None
        if proc.returncode != 0:
            tail = proc.stderr.strip()[-2000:]
            raise DetectorError(
                f"detector command failed with exit {proc.returncode}: {argv}\n{tail}")

    def fit(self, X: DatasetSnapshot, y=None) -> "ExternalDetector":
        self._workdir_ = Path(self.workdir or tempfile.mkdtemp(prefix="pseudolab-ext-"))
        self._workdir_.mkdir(parents=True, exist_ok=True)
        data = self._workdir_ / "train_input.json"
        save_dataset(X, data)  # include_hidden stays False: oracle never leaks
        out_dir = self._workdir_ / "model"
        out_dir.mkdir(exist_ok=True)
        self._run(["train", "--data", str(data), "--out", str(out_dir)])
        self.artifact_tag_ = _digest_tree(out_dir)
        return self

    def predict(self, X: DatasetSnapshot, threads: int = 1) -> list[Detection]:
        if not hasattr(self, "artifact_tag_"):
            raise NotFittedError("detector must be fit before predict")
        data = self._workdir_ / "infer_input.json"
        save_dataset(X, data)
        dets_path = self._workdir_ / "detections.jsonl"
        if dets_path.exists():
            dets_path.unlink()
        self._run(["infer", "--data", str(data), "--out", str(dets_path)])
        if not dets_path.exists():
            raise DetectorProtocolError(
                f"detector wrote no detection file at {dets_path}")
        try:
            detections = load_detections(dets_path)
        except DatasetFormatError as e:
            raise DetectorProtocolError(f"malformed detector output: {e}") from None
        known = {im.image_id for im in X.images}
        for d in detections:
            if d.image_id not in known:
                raise DetectorProtocolError(
                    f"detector output references unknown image {d.image_id!r}")
        return detections


def train(detector, train_set: DatasetSnapshot):
    """Functional alias: fit the detector on the training snapshot."""
    return detector.fit(train_set)


def infer(detector, images: DatasetSnapshot, threads: int = 1) -> list[Detection]:
    """Functional alias: run the fitted detector on a snapshot."""
    return detector.predict(images, threads=threads)
