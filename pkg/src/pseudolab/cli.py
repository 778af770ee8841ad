"""Command-line front end.

One executable, seven subcommands covering the whole workflow:

  ingest    validate and rewrite a dataset file, optionally cropped
  simulate  run the synthetic end-to-end labeling study
  round     drive the labeling loop against a detector
  evaluate  score a detection file against a labeled set
  sweep     accepted-count table over a threshold grid
  coverage  anchor coverage table over image sizes
  report    re-render reports from a recorded run directory

Exit codes: 0 success, 1 I/O failure, 2 malformed dataset or detection
file, 3 detector failure or protocol violation, 4 invalid configuration
(bad flags count as configuration errors).
"""

from __future__ import annotations

import json
import math
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import click

from . import __version__
from .anchors import DEEPER_FPN, STANDARD_FPN, coverage, lesion_population
from .datasets import (
    SPLIT_TRAIN,
    SPLIT_VALIDATION,
    CropWindow,
    apply_crop_transform,
    load_dataset,
    save_dataset,
)
from .detectors import ExternalDetector, SyntheticDetector
from .errors import ConfigError, DatasetFormatError, PseudolabError
from .manifest import RunManifest, write_manifest
from .metrics import EvalProtocol, sensitivity
from .reports import (
    coverage_csv,
    sensitivity_csv,
    sensitivity_markdown,
    sweep_csv,
    write_round_report,
)
from .rounds import RoundConfig, RoundState, run_rounds
from .selection import SelectionCriterion, load_detections, sweep_thresholds
from .simulate import ScenarioConfig, load_scenario, run_simulation
from .validation import CATEGORIES


@click.group()
@click.version_option(__version__, prog_name="pseudolab")
def cli():
    """Iterative pseudo-labeling for partially labeled detection data."""


def _emit(text: str, out_path) -> None:
    if out_path is None:
        click.echo(text, nl=False)
    else:
        Path(out_path).write_text(text, encoding="utf-8")
        click.echo(f"wrote {out_path}")


def _round_line(state: RoundState) -> str:
    total = sum(state.dstar_counts.values())
    return (f"round {state.round_index}: P={state.p_used:g} "
            f"selected={state.l_x} dataset={total}")


def _parse_crop(text: str, snapshot) -> CropWindow:
    """'LEFT,TOP,W,H' keeps that window; 'W,H' centers the window on the
    first image's dimensions."""
    try:
        parts = [float(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"bad crop window {text!r}: expected numbers") from None
    try:
        if len(parts) == 4:
            return CropWindow(*parts)
        if len(parts) == 2:
            if not snapshot.images:
                raise ConfigError("centered crop needs at least one image")
            first = snapshot.images[0]
            w, h = parts
            return CropWindow((first.width - w) / 2.0,
                              (first.height - h) / 2.0, w, h)
    except ValueError as e:
        raise ConfigError(f"bad crop window {text!r}: {e}") from None
    raise ConfigError(f"bad crop window {text!r}: expected LEFT,TOP,W,H or W,H")


@cli.command()
@click.argument("input_path", type=click.Path(dir_okay=False))
@click.option("--format", "fmt", type=click.Choice(["native", "coco"]),
              default="native", show_default=True, help="input file layout")
@click.option("--split", type=click.Choice([SPLIT_TRAIN, SPLIT_VALIDATION]),
              default=SPLIT_TRAIN, show_default=True,
              help="split tag recorded on the loaded snapshot")
@click.option("--crop", "crop_text", default=None, metavar="WINDOW",
              help="fixed crop window: 'LEFT,TOP,W,H', or 'W,H' centered "
                   "on the first image")
@click.option("--out", "out_path", required=True,
              type=click.Path(dir_okay=False), help="normalized dataset file")
def ingest(input_path, fmt, split, crop_text, out_path):
    """Load, validate, optionally crop, and rewrite a dataset.

    Prints a one-line JSON summary of accepted, clamped, and rejected
    annotations; rejects never abort the run.
    """
    snapshot, report = load_dataset(input_path, fmt, split=split)
    summary = {"images": len(snapshot.images), "load": report.to_json_dict()}
    if crop_text is not None:
        window = _parse_crop(crop_text, snapshot)
        try:
            snapshot, crop_report = apply_crop_transform(snapshot, window)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        summary["crop"] = crop_report.to_json_dict()
    save_dataset(snapshot, out_path)
    summary["out"] = str(out_path)
    click.echo(json.dumps(summary, sort_keys=True))


@cli.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False),
              default=None,
              help="scenario JSON; defaults to the built-in corpus-scale scenario")
@click.option("--seed", type=int, default=None, help="override the scenario seed")
@click.option("--threads", type=int, default=1, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--include-hidden", is_flag=True,
              help="also export the generated datasets with their hidden "
                   "truth (testing only)")
def simulate(config_path, seed, threads, out_dir, include_hidden):
    """Generate a synthetic study and run the labeling loop on it."""
    cfg = load_scenario(config_path) if config_path else ScenarioConfig()
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    result = run_simulation(cfg, out_dir=out_dir, threads=threads)
    if include_hidden:
        save_dataset(result.train_set, Path(out_dir) / "train_full.json",
                     include_hidden=True)
        save_dataset(result.val_set, Path(out_dir) / "val_full.json",
                     include_hidden=True)
    for st in result.states:
        click.echo(_round_line(st))
    click.echo(f"done: {len(result.states)} rounds, artifacts in {out_dir}")


_LOOP_KEYS = {"p_initial", "p_step", "m_stop", "max_rounds", "criterion",
              "detector", "paths"}
_CRITERION_KEYS = {"lgt_iou_ceiling", "dedup_iou", "category_specific"}
_PATHS_KEYS = {"data", "val", "out", "workdir"}


def _loop_paths(doc: dict) -> dict:
    """File locations from the config; explicit flags take precedence."""
    paths = doc.get("paths") or {}
    if not isinstance(paths, dict):
        raise ConfigError("paths must be an object")
    unknown = set(paths) - _PATHS_KEYS
    if unknown:
        raise ConfigError(f"unknown paths keys: {sorted(unknown)}")
    bad = [k for k, v in paths.items() if not isinstance(v, str)]
    if bad:
        raise ConfigError(f"paths entries must be strings: {sorted(bad)}")
    return paths


def _read_json_config(path) -> dict:
    with open(path, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config root must be an object")
    return doc


def _loop_config(doc: dict, p_initial, p_step, m_stop, max_rounds,
                 evaluate_each_round: bool) -> RoundConfig:
    """Merge a config document with command-line overrides (flags win)."""
    unknown = set(doc) - _LOOP_KEYS
    if unknown:
        raise ConfigError(f"unknown loop config keys: {sorted(unknown)}")
    crit_doc = doc.get("criterion", {})
    if not isinstance(crit_doc, dict):
        raise ConfigError("criterion must be an object")
    unknown = set(crit_doc) - _CRITERION_KEYS
    if unknown:
        raise ConfigError(f"unknown criterion keys: {sorted(unknown)}")
    try:
        criterion = SelectionCriterion(**crit_doc)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"bad criterion: {e}") from None

    def pick(flag, key, default):
        return flag if flag is not None else doc.get(key, default)

    return RoundConfig(
        p_initial=pick(p_initial, "p_initial", 0.3),
        p_step=pick(p_step, "p_step", 0.1),
        m_stop=pick(m_stop, "m_stop", 100),
        max_rounds=pick(max_rounds, "max_rounds", 7),
        criterion=criterion,
        evaluate_each_round=evaluate_each_round)


_EXTERNAL_KEYS = {"command", "workdir", "timeout", "env_allowlist"}
_SYNTHETIC_KEYS = {"seed", "synthetic_params"}


def _loop_detector(doc: dict, command_str, workdir, timeout, default_workdir):
    """Detector from the --command flag, or from the config's detector
    entry when no flag is given."""
    det_doc = dict(doc.get("detector") or {})
    if command_str is not None:
        det_doc = {"kind": "external", "command": command_str,
                   "timeout": timeout}
        if workdir is not None:
            det_doc["workdir"] = workdir
    if not det_doc:
        raise ConfigError(
            "no detector: pass --command or a config with a detector entry")
    kind = det_doc.pop("kind", "external")
    if kind == "external":
        unknown = set(det_doc) - _EXTERNAL_KEYS
        if unknown:
            raise ConfigError(f"unknown detector keys: {sorted(unknown)}")
        if "command" not in det_doc:
            raise ConfigError("external detector needs a command")
        det_doc.setdefault("workdir", default_workdir)
        return ExternalDetector(**det_doc)
    if kind == "synthetic":
        unknown = set(det_doc) - _SYNTHETIC_KEYS
        if unknown:
            raise ConfigError(f"unknown detector keys: {sorted(unknown)}")
        params = det_doc.get("synthetic_params") or {}
        if not isinstance(params, dict):
            raise ConfigError("synthetic detector params must be an object")
        try:
            return SyntheticDetector(seed=det_doc.get("seed", 0), **params)
        except TypeError as e:
            raise ConfigError(f"bad synthetic detector params: {e}") from None
    raise ConfigError(f"unknown detector kind {kind!r}")


def _detector_manifest_entry(detector) -> dict:
    if isinstance(detector, ExternalDetector):
        argv = detector._argv()
        return {"kind": "external", "command": argv,
                "timeout": detector.timeout}
    return {"kind": "synthetic", "params": detector.get_params()}


@cli.command("round")
@click.option("--data", "data_path", default=None,
              type=click.Path(dir_okay=False),
              help="training dataset file (or config paths.data)")
@click.option("--val", "val_path", default=None, type=click.Path(dir_okay=False),
              help="held-out dataset used when evaluating each round")
@click.option("--config", "config_path", default=None,
              type=click.Path(dir_okay=False),
              help="loop config JSON; explicit flags override it")
@click.option("--command", "command_str", default=None,
              help="external detector command, e.g. 'python3 detector.py'")
@click.option("--workdir", default=None, type=click.Path(file_okay=False),
              help="external detector working directory")
@click.option("--timeout", type=float, default=3600.0, show_default=True,
              help="external detector step timeout in seconds")
@click.option("--p-initial", type=float, default=None,
              help="round-1 confidence threshold [default: 0.3]")
@click.option("--p-step", type=float, default=None,
              help="per-round threshold increment [default: 0.1]")
@click.option("--m-stop", type=int, default=None,
              help="stop once a round selects at most this many [default: 100]")
@click.option("--max-rounds", type=int, default=None,
              help="hard round cap [default: 7]")
@click.option("--eval-each-round", is_flag=True,
              help="evaluate sensitivity on --val after every round")
@click.option("--threads", type=int, default=1, show_default=True)
@click.option("--out", "out_dir", default=None, type=click.Path(file_okay=False),
              help="run directory (or config paths.out)")
def round_cmd(data_path, val_path, config_path, command_str, workdir, timeout,
              p_initial, p_step, m_stop, max_rounds, eval_each_round,
              threads, out_dir):
    """Run the iterative labeling loop against a detector.

    Each round's dataset, detections, selections, and state land in
    OUT/rounds/<k>/ as the loop goes, so a failed run keeps its
    completed rounds.
    """
    doc = _read_json_config(config_path) if config_path else {}
    paths = _loop_paths(doc)
    data_path = data_path if data_path is not None else paths.get("data")
    val_path = val_path if val_path is not None else paths.get("val")
    out_dir = out_dir if out_dir is not None else paths.get("out")
    workdir = workdir if workdir is not None else paths.get("workdir")
    if data_path is None:
        raise ConfigError("no training dataset: pass --data or config paths.data")
    if out_dir is None:
        raise ConfigError("no run directory: pass --out or config paths.out")
    cfg = _loop_config(doc, p_initial, p_step, m_stop, max_rounds,
                       eval_each_round)
    detector = _loop_detector(doc, command_str, workdir, timeout,
                              default_workdir=str(Path(out_dir) / "detector"))
    if eval_each_round and val_path is None:
        raise ConfigError("--eval-each-round needs --val")
    train_set, _ = load_dataset(data_path, split=SPLIT_TRAIN)
    val_set = None
    if val_path is not None:
        val_set, _ = load_dataset(val_path, split=SPLIT_VALIDATION)
    states = run_rounds(train_set, val_set, detector, cfg, out_dir=out_dir,
                        threads=threads)
    manifest_doc = {
        "loop": {"p_initial": cfg.p_initial, "p_step": cfg.p_step,
                 "m_stop": cfg.m_stop, "max_rounds": cfg.max_rounds},
        "detector": _detector_manifest_entry(detector),
        "data": str(data_path), "val": str(val_path) if val_path else None,
    }
    seeds = {}
    if isinstance(detector, SyntheticDetector):
        seeds["detector"] = detector.seed
    write_manifest(RunManifest.for_run(manifest_doc, seeds=seeds), out_dir)
    write_round_report(states, out_dir)
    for st in states:
        click.echo(_round_line(st))
    click.echo(f"done: {len(states)} rounds, artifacts in {out_dir}")


@cli.command()
@click.option("--data", "data_path", required=True,
              type=click.Path(dir_okay=False), help="labeled dataset file")
@click.option("--detections", "det_path", required=True,
              type=click.Path(dir_okay=False), help="JSON-lines detections")
@click.option("--score-floor", type=float, default=0.1, show_default=True,
              help="keep detections scoring at or above this")
@click.option("--max-dets", type=int, default=100, show_default=True,
              help="keep at most this many detections per image")
@click.option("--emit", type=click.Choice(["csv", "markdown", "json"]),
              default="csv", show_default=True)
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False),
              help="write here instead of stdout")
def evaluate(data_path, det_path, score_floor, max_dets, emit, out_path):
    """Per-category sensitivity of a detection file on a labeled set."""
    snapshot, _ = load_dataset(data_path, split=SPLIT_VALIDATION)
    detections = load_detections(det_path)
    try:
        protocol = EvalProtocol(score_floor=score_floor,
                                max_dets_per_image=max_dets)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    table = sensitivity(detections, snapshot, protocol)
    if emit == "csv":
        text = sensitivity_csv(table)
    elif emit == "markdown":
        text = sensitivity_markdown(table)
    else:
        text = json.dumps(table.to_json_dict(), sort_keys=True) + "\n"
    _emit(text, out_path)


def _threshold_grid(p_min: float, p_max: float, p_step: float) -> list[float]:
    if p_step <= 0:
        raise ConfigError(f"p-step must be > 0, got {p_step}")
    if p_max < p_min:
        raise ConfigError(f"p-max {p_max} is below p-min {p_min}")
    n = int(math.floor((p_max - p_min) / p_step + 1e-9))
    return [round(p_min + i * p_step, 12) for i in range(n + 1)]


@cli.command()
@click.option("--data", "data_path", required=True,
              type=click.Path(dir_okay=False),
              help="training dataset providing the existing-label context")
@click.option("--detections", "det_path", required=True,
              type=click.Path(dir_okay=False), help="JSON-lines detections")
@click.option("--p-min", type=float, default=0.0, show_default=True)
@click.option("--p-max", type=float, default=0.9, show_default=True)
@click.option("--p-step", type=float, default=0.1, show_default=True)
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False),
              help="write here instead of stdout")
def sweep(data_path, det_path, p_min, p_max, p_step, out_path):
    """Accepted pseudo-label counts over a grid of score thresholds."""
    snapshot, _ = load_dataset(data_path)
    detections = load_detections(det_path)
    grid = _threshold_grid(p_min, p_max, p_step)
    rows = sweep_thresholds(detections, snapshot, grid)
    _emit(sweep_csv(rows), out_path)


def _parse_sizes(text: str, extras: Sequence[float]) -> list[float]:
    try:
        parts = [float(v) for v in text.split(":")]
    except ValueError:
        raise ConfigError(f"bad size range {text!r}: expected numbers") from None
    if len(parts) != 3:
        raise ConfigError(f"bad size range {text!r}: expected START:STOP:STEP")
    start, stop, step = parts
    if start <= 0 or stop < start or step <= 0:
        raise ConfigError(f"bad size range {text!r}")
    n = int(math.floor((stop - start) / step + 1e-9))
    sizes = [start + i * step for i in range(n + 1)]
    for v in extras:
        if v <= 0:
            raise ConfigError(f"sizes must be positive, got {v}")
        if v not in sizes:
            sizes.append(v)
    return sorted(sizes)


@cli.command("coverage")
@click.option("--sizes", "sizes_text", default="800:2000:200",
              show_default=True, metavar="START:STOP:STEP",
              help="inclusive range of square image sizes")
@click.option("--size", "extra_sizes", multiple=True, type=float,
              help="extra single size, repeatable")
@click.option("--pyramid", type=click.Choice(["standard", "deeper", "both"]),
              default="both", show_default=True)
@click.option("--matcher", "matcher_choice",
              type=click.Choice(["cf", "iou", "both"]), default="both",
              show_default=True)
@click.option("--iou-threshold", type=float, default=0.5, show_default=True)
@click.option("--samples", type=int, default=2000, show_default=True,
              help="sampled lesions per category")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False),
              help="write here instead of stdout")
def coverage_cmd(sizes_text, extra_sizes, pyramid, matcher_choice,
                 iou_threshold, samples, seed, out_path):
    """Fraction of sampled lesions matched by at least one anchor.

    Lesion sizes are drawn from the built-in population model; the same
    seed gives the same population at every image size, so coverage
    differences come from the grids alone.
    """
    if samples < 1:
        raise ConfigError(f"samples must be >= 1, got {samples}")
    sizes = _parse_sizes(sizes_text, extra_sizes)
    pyramids = {"standard": [("standard", STANDARD_FPN)],
                "deeper": [("deeper", DEEPER_FPN)],
                "both": [("standard", STANDARD_FPN), ("deeper", DEEPER_FPN)]}[pyramid]
    matchers = ["cf", "iou"] if matcher_choice == "both" else [matcher_choice]
    rows = []
    for size in sizes:
        population = lesion_population({c: samples for c in CATEGORIES},
                                       size, seed)
        by_cat = {c: [b for cc, b in population if cc == c] for c in CATEGORIES}
        for name, fpn in pyramids:
            for c in CATEGORIES:
                for m in matchers:
                    value = coverage(by_cat[c], size, fpn=fpn, matcher=m,
                                     iou_threshold=iou_threshold)
                    rows.append({"image_size": size, "pyramid": name,
                                 "category": c, "matcher": m,
                                 "coverage": value})
    _emit(coverage_csv(rows), out_path)


def _read_states(run_dir) -> list[dict]:
    rounds_dir = Path(run_dir) / "rounds"
    if not rounds_dir.is_dir():
        raise DatasetFormatError(f"{run_dir}: no rounds/ directory to report on")
    states = []
    subdirs = sorted((p for p in rounds_dir.iterdir() if p.is_dir()),
                     key=lambda p: (0, int(p.name)) if p.name.isdigit()
                     else (1, p.name))
    for sub in subdirs:
        state_path = sub / "state.json"
        if not state_path.is_file():
            continue
        with open(state_path, encoding="utf-8") as f:
            try:
                states.append(json.load(f))
            except json.JSONDecodeError as e:
                raise DatasetFormatError(
                    f"{state_path}: invalid JSON: {e}") from None
    if not states:
        raise DatasetFormatError(f"{run_dir}: no recorded round states")
    return states


@cli.command("report")
@click.argument("run_dir", type=click.Path(file_okay=False))
@click.option("--label", default="final", show_default=True,
              help="row label in final_counts.csv")
def report_cmd(run_dir, label):
    """Re-render report.md, report.json, and final_counts.csv from the
    state files a recorded run left in RUN_DIR/rounds/."""
    states = _read_states(run_dir)
    try:
        write_round_report(states, run_dir, final_label=label)
    except ValueError as e:
        raise DatasetFormatError(f"{run_dir}: {e}") from None
    click.echo(f"wrote report.md, report.json, final_counts.csv in {run_dir}")


def main(argv: Sequence[str] | None = None) -> int:
    """Entry point with the exit-code contract applied."""
    try:
        cli.main(args=argv, standalone_mode=False)
    except PseudolabError as e:
        click.echo(f"error: {e}", err=True)
        return e.exit_code
    except OSError as e:
        click.echo(f"error: {e}", err=True)
        return 1
    except click.UsageError as e:
        e.show()
        return 4
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
