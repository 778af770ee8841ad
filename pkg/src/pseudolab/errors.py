"""Exception taxonomy shared across the toolkit.

Each class carries the process exit code the CLI maps it to, so commands
can translate failures uniformly.
"""

from __future__ import annotations

EXIT_OK = 0
EXIT_IO = 1
EXIT_FORMAT = 2
EXIT_DETECTOR = 3
EXIT_CONFIG = 4


class PseudolabError(Exception):
    """Base class for toolkit errors."""

    exit_code = EXIT_FORMAT


class DatasetFormatError(PseudolabError):
    """A dataset, detection, or config artifact failed to parse or validate."""

    exit_code = EXIT_FORMAT


class InvariantViolation(PseudolabError):
    """Internal data invariant broken; usually signals a bug upstream."""

    exit_code = EXIT_FORMAT


class DetectorError(PseudolabError):
    """An external detector process failed (nonzero exit, timeout, crash)."""

    exit_code = EXIT_DETECTOR


class DetectorProtocolError(PseudolabError):
    """An external detector violated the adapter file protocol."""

    exit_code = EXIT_DETECTOR


class ConfigError(PseudolabError):
    """A run configuration is malformed or self-contradictory."""

    exit_code = EXIT_CONFIG
