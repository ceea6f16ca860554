"""Exception hierarchy shared by services, parsers and the CLI.

Each class carries the process exit code the CLI uses for it.
"""

from __future__ import annotations

from typing import Any


class CompDiffError(Exception):
    exit_code = 1


class ConfigError(CompDiffError, ValueError):
    """Raised when a config value, schedule bound or name reference is invalid."""

    exit_code = 2


class CapabilityError(ConfigError):
    """Raised when an operation needs an energy that a model or node cannot provide."""


class NumericAbort(CompDiffError, RuntimeError):
    """Raised when training or sampling produces non-finite values."""

    exit_code = 3

    def __init__(self, message: str, diagnostics: dict[str, Any] | None = None) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class MetricUnreliable(CompDiffError):
    exit_code = 4


class CheckpointError(CompDiffError):
    exit_code = 2
    code = 10


class CheckpointFormatError(CheckpointError):
    code = 10


class CheckpointVersionError(CheckpointError):
    code = 11


class CheckpointTruncatedError(CheckpointError):
    code = 12


class CheckpointChecksumError(CheckpointError):
    code = 13


class CheckpointArchitectureError(CheckpointError):
    code = 14


def to_float(value: Any, field_name: str) -> float:
    try:
        return float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"Invalid {field_name}: expected number") from exc


def to_int(value: Any, field_name: str) -> int:
    if isinstance(value, bool):
        raise ConfigError(f"Invalid {field_name}: expected integer")
    try:
        number = int(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"Invalid {field_name}: expected integer") from exc
    if isinstance(value, float) and number != value:
        raise ConfigError(f"Invalid {field_name}: expected integer")
    return number
