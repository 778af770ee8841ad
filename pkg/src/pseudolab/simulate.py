"""Synthetic end-to-end scenarios: generate a partially-labeled dataset
with known hidden truth, run the multi-round loop on it, and keep every
byte reproducible from (config, seed).

A scenario plants a lesion population across square fundus-like images,
marks a configured fraction of lesions as manually annotated, and hides
the rest inside each image's hidden_truth. The synthetic detector then
plays the trained model, so the loop's selection and termination
behavior can be observed against exact ground truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

from .anchors import lesion_population
from .datasets import (
    Annotation,
    DatasetSnapshot,
    ImageRecord,
    save_dataset,
    split_dataset,
)
from .detectors import SyntheticDetector
from .errors import ConfigError
from .manifest import RunManifest, write_manifest
from .reports import write_round_report
from .rounds import RoundConfig, RoundState, _execute_rounds
from .streams import stream_rng
from .validation import CATEGORIES, check_unit_interval

# Lesion instance counts and image geometry shaped like the motivating
# fundus corpus: ~5.2k images at 2136 px after center cropping, with
# category frequencies spanning two orders of magnitude.
CORPUS_SCALE_COUNTS = {1: 18493, 2: 7703, 3: 9316, 4: 654}
CORPUS_SCALE_N_IMAGES = 5198
CORPUS_SCALE_IMAGE_SIZE = 2136.0

_DETECTOR_KEYS = frozenset({
    "recall_base", "recall_gain", "tp_score_alpha", "tp_score_beta",
    "fp_rate", "fp_score_alpha", "fp_score_beta", "localization_jitter",
    "fp_size_range"})


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything a simulation run depends on.

    min_lesion_side keeps planted lesions meaningfully larger than the
    detector's false-positive boxes, so a false positive can never pass
    the center-focus check against a real lesion.
    """

    seed: int = 0
    n_images: int = CORPUS_SCALE_N_IMAGES
    image_size: float = CORPUS_SCALE_IMAGE_SIZE
    category_counts: dict[int, int] = field(
        default_factory=lambda: dict(CORPUS_SCALE_COUNTS))
    label_fraction: float = 0.85
    split_ratio: float = 0.8
    min_lesion_side: float = 20.0
    detector: dict = field(default_factory=lambda: {
        "recall_base": -0.6, "recall_gain": 0.15, "fp_rate": 0.3,
        "localization_jitter": 1.0})
    p_initial: float = 0.3
    p_step: float = 0.1
    m_stop: int = 100
    max_rounds: int = 7
    evaluate_each_round: bool = False

    def __post_init__(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError(f"seed must be an int, got {self.seed!r}")
        if not isinstance(self.n_images, int) or self.n_images < 2:
            raise ConfigError(f"n_images must be an int >= 2, got {self.n_images!r}")
        if not self.image_size > 0:
            raise ConfigError(f"image_size must be > 0, got {self.image_size!r}")
        counts = {c: 0 for c in CATEGORIES}
        for c, n in self.category_counts.items():
            c = int(c)
            if c not in CATEGORIES:
                raise ConfigError(f"unknown category {c} in category_counts")
            if not isinstance(n, int) or n < 0:
                raise ConfigError(f"count for category {c} must be an int >= 0")
            counts[c] = n
        object.__setattr__(self, "category_counts", counts)
        try:
            check_unit_interval(self.label_fraction, "label_fraction")
            check_unit_interval(self.split_ratio, "split_ratio",
                                open_low=True, open_high=True)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if not self.min_lesion_side >= 0:
            raise ConfigError(f"min_lesion_side must be >= 0, got {self.min_lesion_side!r}")
        unknown = set(self.detector) - _DETECTOR_KEYS
        if unknown:
            raise ConfigError(f"unknown detector keys: {sorted(unknown)}")
        # threshold schedule is validated by RoundConfig
        self.rounds_config()

    def rounds_config(self, evaluate_each_round: bool | None = None) -> RoundConfig:
        flag = self.evaluate_each_round if evaluate_each_round is None \
            else evaluate_each_round
        return RoundConfig(p_initial=self.p_initial, p_step=self.p_step,
                           m_stop=self.m_stop, max_rounds=self.max_rounds,
                           evaluate_each_round=flag)

    def build_detector(self) -> SyntheticDetector:
        kwargs = dict(self.detector)
        if "fp_size_range" in kwargs:
            kwargs["fp_size_range"] = tuple(kwargs["fp_size_range"])
        return SyntheticDetector(seed=self.seed, **kwargs)

    def to_json_dict(self) -> dict:
        return {
            "seed": self.seed, "n_images": self.n_images,
            "image_size": self.image_size,
            "category_counts": {str(c): n for c, n in
                                sorted(self.category_counts.items())},
            "label_fraction": self.label_fraction,
            "split_ratio": self.split_ratio,
            "min_lesion_side": self.min_lesion_side,
            "detector": {k: list(v) if isinstance(v, tuple) else v
                         for k, v in sorted(self.detector.items())},
            "rounds": {"p_initial": self.p_initial, "p_step": self.p_step,
                       "m_stop": self.m_stop, "max_rounds": self.max_rounds},
            "evaluate_each_round": self.evaluate_each_round,
        }

    @classmethod
    def from_json_dict(cls, doc: Mapping) -> "ScenarioConfig":
        if not isinstance(doc, Mapping):
            raise ConfigError("scenario config must be a JSON object")
        known = {"seed", "n_images", "image_size", "category_counts",
                 "label_fraction", "split_ratio", "min_lesion_side",
                 "detector", "rounds", "evaluate_each_round"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown scenario config keys: {sorted(unknown)}")
        kwargs = {k: doc[k] for k in known - {"rounds", "category_counts"}
                  if k in doc}
        if "category_counts" in doc:
            kwargs["category_counts"] = {int(c): n for c, n
                                         in doc["category_counts"].items()}
        rounds = doc.get("rounds", {})
        unknown = set(rounds) - {"p_initial", "p_step", "m_stop", "max_rounds"}
        if unknown:
            raise ConfigError(f"unknown rounds config keys: {sorted(unknown)}")
        kwargs.update(rounds)
        try:
            return cls(**kwargs)
        except TypeError as e:
            raise ConfigError(f"bad scenario config: {e}") from None


def load_scenario(path) -> ScenarioConfig:
    with open(path, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from None
    return ScenarioConfig.from_json_dict(doc)


def build_scenario(cfg: ScenarioConfig) -> DatasetSnapshot:
    """Generate the full hidden-truth dataset for a scenario.

    Lesions are sampled once for the whole corpus, assigned to images
    uniformly, and each becomes a manual annotation with probability
    label_fraction; every lesion lands in its image's hidden_truth.
    """
    lesions = lesion_population(cfg.category_counts, cfg.image_size,
                                cfg.seed, min_side=cfg.min_lesion_side)
    rng = stream_rng(cfg.seed, "assign")
    image_of = rng.integers(0, cfg.n_images, len(lesions))
    labeled = rng.random(len(lesions)) < cfg.label_fraction
    width = len(str(cfg.n_images - 1))
    hidden: list[list[Annotation]] = [[] for _ in range(cfg.n_images)]
    annotated: list[list[Annotation]] = [[] for _ in range(cfg.n_images)]
    for i, (category, box) in enumerate(lesions):
        ann = Annotation.manual(box, category)
        hidden[image_of[i]].append(ann)
        if labeled[i]:
            annotated[image_of[i]].append(ann)
    images = tuple(
        ImageRecord(image_id=f"img{i:0{width}d}", width=cfg.image_size,
                    height=cfg.image_size, annotations=tuple(annotated[i]),
                    hidden_truth=tuple(hidden[i]))
        for i in range(cfg.n_images))
    return DatasetSnapshot(images=images, round_index=0)


@dataclass(frozen=True)
class SimulationResult:
    config: ScenarioConfig
    train_set: DatasetSnapshot
    val_set: DatasetSnapshot
    states: tuple[RoundState, ...]
    final_train: DatasetSnapshot


def run_simulation(cfg: ScenarioConfig, out_dir=None,
                   threads: int = 1) -> SimulationResult:
    """Build the scenario, run the labeling loop, and report.

    With out_dir set, writes the per-round artifact directories, a run
    manifest, the round report, and (for audits) the generated train
    and validation datasets without hidden truth.
    """
    full = build_scenario(cfg)
    train_set, val_set = split_dataset(full, cfg.split_ratio, cfg.seed)
    detector = cfg.build_detector()
    states, final = _execute_rounds(train_set, val_set, detector,
                                    cfg.rounds_config(), out_dir=out_dir,
                                    threads=threads)
    if out_dir is not None:
        out = Path(out_dir)
        save_dataset(train_set, out / "train.json")
        save_dataset(val_set, out / "val.json")
        write_manifest(RunManifest.for_run(cfg.to_json_dict(),
                                           seeds={"scenario": cfg.seed}), out)
        write_round_report(states, out)
    return SimulationResult(config=cfg, train_set=train_set, val_set=val_set,
                            states=tuple(states), final_train=final)


def corpus_scale_scenario(seed: int = 0, **overrides) -> ScenarioConfig:
    """The default scenario: corpus-scale counts, 85% labeling, P rising
    from 0.3 by 0.1, M = 100."""
    return replace(ScenarioConfig(seed=seed), **overrides)
