"""Iterative pseudo-labeling toolkit for partially labeled detection datasets.

The core loop: train a detector on whatever labels exist, run it back
over its own training images, keep confident detections that do not
touch any existing annotation, merge them in as pseudo-labels, raise the
confidence bar, and repeat until a round stops finding enough new boxes.

Modules map onto the workflow stages: datasets (file formats, splits,
crops), geometry and metrics (the center-focus match and sensitivity
protocol), selection (the pseudo-label acceptance rule), detectors
(a synthetic detector for studies plus a subprocess adapter for real
ones), rounds (the loop orchestrator), anchors (anchor-grid coverage
analysis), simulate (end-to-end synthetic studies), reports and
manifest (artifact rendering), and cli (the command-line front end).
"""

__version__ = "0.1.0"

from .anchors import (
    DEEPER_FPN,
    STANDARD_FPN,
    AnchorConfig,
    FpnConfig,
    FpnLevel,
    coverage,
    coverage_enumerated,
    generate_anchors,
    lesion_population,
)
from .datasets import (
    Annotation,
    CropWindow,
    DatasetSnapshot,
    ImageRecord,
    apply_crop_transform,
    count_by_category,
    load_dataset,
    save_dataset,
    split_dataset,
)
from .detectors import ExternalDetector, SyntheticDetector
from .errors import (
    ConfigError,
    DatasetFormatError,
    DetectorError,
    DetectorProtocolError,
    InvariantViolation,
    PseudolabError,
)
from .geometry import BBox, CfParams, cf_match, contains_center, iou
from .metrics import EvalProtocol, SensitivityTable, match_image, sensitivity
from .rounds import MultiRoundTrainer, RoundConfig, RoundState, merge_pseudo, run_rounds
from .selection import (
    Detection,
    PseudoLabel,
    PseudoLabelSelector,
    SelectionCriterion,
    load_detections,
    save_detections,
    select_ugt,
    sweep_thresholds,
)
from .simulate import ScenarioConfig, SimulationResult, corpus_scale_scenario, run_simulation

__all__ = [
    "__version__",
    "AnchorConfig", "Annotation", "BBox", "CfParams", "ConfigError",
    "CropWindow", "DEEPER_FPN", "DatasetFormatError", "DatasetSnapshot",
    "Detection", "DetectorError", "DetectorProtocolError", "EvalProtocol",
    "ExternalDetector", "FpnConfig", "FpnLevel", "ImageRecord",
    "InvariantViolation", "MultiRoundTrainer", "PseudoLabel",
    "PseudoLabelSelector", "PseudolabError", "RoundConfig", "RoundState",
    "STANDARD_FPN", "ScenarioConfig", "SelectionCriterion",
    "SensitivityTable", "SimulationResult", "SyntheticDetector",
    "apply_crop_transform", "cf_match", "contains_center",
    "count_by_category", "coverage", "coverage_enumerated",
    "generate_anchors", "iou", "lesion_population", "load_dataset",
    "load_detections", "match_image", "merge_pseudo",
    "corpus_scale_scenario", "run_rounds", "run_simulation",
    "save_dataset", "save_detections", "select_ugt", "sensitivity",
    "split_dataset", "sweep_thresholds",
]
