"""Report rendering: CSV, Markdown, and JSON emitters.

All renderers are pure functions from already-computed values to text,
so their output is byte-stable; writers add a trailing newline and
nothing else. Numeric formatting rules are part of the contract:
thresholds use the shortest plain decimal (``{:g}``), counts are bare
integers, sensitivities and coverages are fixed-point.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping, Sequence

from .metrics import SensitivityTable
from .rounds import RoundState
from .validation import CATEGORIES

_CAT_HEADER = ",".join(f"cat{c}" for c in CATEGORIES)


def format_threshold(p: float) -> str:
    return f"{p:g}"


def _counts_cells(counts: Mapping[int, int]) -> str:
    return ",".join(str(int(counts.get(c, 0))) for c in CATEGORIES)


def sweep_csv(rows: Sequence[tuple[float, Mapping[int, int]]]) -> str:
    """Selected-count table over a threshold grid.

    Layout: header ``P,cat1,cat2,cat3,cat4``, one row per threshold,
    e.g. ``0.3,805,431,490,303``.
    """
    lines = [f"P,{_CAT_HEADER}"]
    for p, counts in rows:
        lines.append(f"{format_threshold(p)},{_counts_cells(counts)}")
    return "\n".join(lines) + "\n"


def final_counts_csv(rows: Sequence[tuple[str, Mapping[int, int]]]) -> str:
    """Per-model final pseudo-label counts.

    Layout: header ``model,cat1,cat2,cat3,cat4``, one row per model,
    e.g. ``F,1043,632,612,417``.
    """
    lines = [f"model,{_CAT_HEADER}"]
    for label, counts in rows:
        if "," in label or "\n" in label:
            raise ValueError(f"model label {label!r} cannot contain , or newline")
        lines.append(f"{label},{_counts_cells(counts)}")
    return "\n".join(lines) + "\n"


def _sens_cell(value: float | None) -> str:
    return "" if value is None else f"{value:.4f}"


def sensitivity_csv(table: SensitivityTable) -> str:
    lines = ["category,tp,fn,sensitivity"]
    for c in CATEGORIES:
        s = table.per_category[c]
        lines.append(f"{c},{s.tp},{s.fn},{_sens_cell(s.sensitivity)}")
    return "\n".join(lines) + "\n"


def sensitivity_markdown(table: SensitivityTable) -> str:
    lines = ["| category | tp | fn | sensitivity |",
             "| --- | --- | --- | --- |"]
    for c in CATEGORIES:
        s = table.per_category[c]
        cell = _sens_cell(s.sensitivity) or "n/a"
        lines.append(f"| {c} | {s.tp} | {s.fn} | {cell} |")
    return "\n".join(lines) + "\n"


def coverage_csv(rows: Sequence[Mapping]) -> str:
    """Coverage sweep table.

    Rows carry image_size, pyramid, category, matcher, coverage; the
    caller controls row order and the renderer keeps it.
    """
    lines = ["image_size,pyramid,category,matcher,coverage"]
    for r in rows:
        lines.append(f"{r['image_size']:g},{r['pyramid']},{r['category']},"
                     f"{r['matcher']},{r['coverage']:.6f}")
    return "\n".join(lines) + "\n"


def _state_dict(state: "RoundState | Mapping") -> dict:
    """Normalize a RoundState or a recorded state.json payload."""
    if isinstance(state, RoundState):
        return state.to_json_dict()
    missing = {"round_index", "p_used", "l_x", "x_counts",
               "dstar_counts"} - set(state)
    if missing:
        raise ValueError(f"state record is missing {sorted(missing)}")
    return dict(state)


def round_report_markdown(states: Sequence) -> str:
    """Per-round Markdown summary; accepts RoundStates or state dicts."""
    if not states:
        raise ValueError("round report needs at least one round")
    records = [_state_dict(st) for st in states]
    lines = ["# Pseudo-labeling rounds", "",
             "| round | P | selected | " +
             " | ".join(f"x cat{c}" for c in CATEGORIES) +
             " | dataset total |",
             "| --- | --- | --- | " + " | ".join("---" for _ in CATEGORIES) +
             " | --- |"]
    for st in records:
        total = sum(st["dstar_counts"].get(str(c), 0) for c in CATEGORIES)
        cells = " | ".join(str(st["x_counts"][str(c)]) for c in CATEGORIES)
        lines.append(f"| {st['round_index']} | {format_threshold(st['p_used'])} "
                     f"| {st['l_x']} | {cells} | {total} |")
    evaluated = [st for st in records if st.get("eval")]
    if evaluated:
        lines += ["", "## Validation sensitivity per round", "",
                  "| round | " + " | ".join(f"cat{c}" for c in CATEGORIES) + " |",
                  "| --- | " + " | ".join("---" for _ in CATEGORIES) + " |"]
        for st in evaluated:
            cells = " | ".join(
                _sens_cell(st["eval"][str(c)]["sensitivity"]) or "n/a"
                for c in CATEGORIES)
            lines.append(f"| {st['round_index']} | {cells} |")
    return "\n".join(lines) + "\n"


def round_report_json(states: Sequence) -> dict:
    if not states:
        raise ValueError("round report needs at least one round")
    return {"rounds": [_state_dict(st) for st in states]}


def write_round_report(states: Sequence, out_dir,
                       final_label: str = "final") -> None:
    """Write report.md, report.json, and final_counts.csv into out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.md").write_text(round_report_markdown(states), encoding="utf-8")
    with open(out / "report.json", "w", encoding="utf-8") as f:
        json.dump(round_report_json(states), f, separators=(",", ":"), sort_keys=True)
        f.write("\n")
    totals = {c: 0 for c in CATEGORIES}
    for st in states:
        for key, n in _state_dict(st)["x_counts"].items():
            totals[int(key)] += n
    (out / "final_counts.csv").write_text(
        final_counts_csv([(final_label, totals)]), encoding="utf-8")
