"""Small input-validation helpers used by constructors and estimators."""

from __future__ import annotations

import math

CATEGORIES = (1, 2, 3, 4)

CATEGORY_NAMES = {
    1: "blot_hemorrhage",
    2: "microaneurysm",
    3: "hard_exudate",
    4: "cotton_wool_spot",
}


def check_finite(value, name: str) -> float:
    v = float(value)
    if not math.isfinite(v):
        raise ValueError(f"{name} must be finite, got {value!r}")
    return v


def check_positive(value, name: str) -> float:
    v = check_finite(value, name)
    if v <= 0:
        raise ValueError(f"{name} must be > 0, got {value!r}")
    return v


def check_non_negative(value, name: str) -> float:
    v = check_finite(value, name)
    if v < 0:
        raise ValueError(f"{name} must be >= 0, got {value!r}")
    return v


def check_unit_interval(value, name: str, *, open_low=False, open_high=False) -> float:
    """Validate value lies in [0, 1], with optionally open endpoints."""
    v = check_finite(value, name)
    low_ok = v > 0 if open_low else v >= 0
    high_ok = v < 1 if open_high else v <= 1
    if not (low_ok and high_ok):
        lo = "(" if open_low else "["
        hi = ")" if open_high else "]"
        raise ValueError(f"{name} must lie in {lo}0, 1{hi}, got {value!r}")
    return v


def check_category(value, name: str = "category") -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValueError(f"{name} must be an int in {CATEGORIES}, got {value!r}")
    if value not in CATEGORIES:
        raise ValueError(f"{name} must be one of {CATEGORIES}, got {value!r}")
    return value
