from __future__ import annotations

from typing import Any, Dict, Optional


class SvcMergeError(Exception):
    """Base error carrying the parameter/path it concerns."""

    exit_code = 2

    def __init__(
        self,
        message: str,
        *,
        parameter: Optional[str] = None,
        path: Optional[str] = None,
        detail: Optional[Dict[str, Any]] = None,
    ):
        super().__init__(message)
        self.message = message
        self.parameter = parameter
        self.path = path
        self.detail = detail or {}

    def __str__(self):
        base = self.message
        parts = []
        if self.parameter is not None:
            parts.append(f"parameter={self.parameter}")
        if self.path:
            parts.append(f"path={self.path}")
        for k, v in self.detail.items():
            parts.append(f"{k}={v}")
        if parts:
            base += " [" + " | ".join(parts) + "]"
        return base

    @property
    def kind(self) -> str:
        return type(self).__name__

    def with_parameter(self, name: str) -> "SvcMergeError":
        if self.parameter is None:
            self.parameter = name
        return self


# ---------- families ----------
class UsageError(SvcMergeError):
    exit_code = 1


class DataError(SvcMergeError):
    exit_code = 2


class NumericalError(SvcMergeError):
    exit_code = 3


# ---------- usage ----------
class ConfigError(UsageError):
    pass


class InvalidTrimFractionError(UsageError):
    pass


class InvalidDropRateError(UsageError):
    pass


class InvalidAlphaError(UsageError):
    pass


class InvalidTargetTaskError(UsageError):
    pass


# ---------- data ----------
class MalformedHeaderError(DataError):
    pass


class ShapeDataMismatchError(DataError):
    pass


class UnsupportedDtypeError(DataError):
    pass


class IoFailureError(DataError):
    pass


class ParameterSetMismatchError(DataError):
    pass


class ShapeMismatchError(DataError):
    pass


class EmptyTaskListError(DataError):
    pass


class LengthMismatchError(DataError):
    pass


class DimensionMismatchError(DataError):
    pass


# ---------- numerical ----------
class NonFiniteInputError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    pass


class NonUnitDirectionError(NumericalError):
    pass


class DegenerateResponseError(NumericalError):
    pass


class EmptyScalingListError(NumericalError):
    pass
