"""Exception hierarchy shared by the core and experiment packages."""

from __future__ import annotations

from typing import Iterable, List


class LrlcError(Exception):
    """Base class for every error raised by this project."""


class ShapeError(LrlcError, ValueError):
    """Operand extents or channel counts do not agree."""


class ConfigurationError(LrlcError, ValueError):
    """A layer, dataset or run was configured with unusable values."""


class NonFiniteError(LrlcError, FloatingPointError):
    """A tensor produced or consumed by an operation contains NaN or Inf."""


class UnsupportedOperationError(LrlcError):
    """The requested operation is not defined for this layer kind."""


class DataError(LrlcError, ValueError):
    """Example data (labels, splits) is inconsistent with the task."""


class DataFormatError(DataError):
    """A dataset or container file is malformed."""

    def __init__(self, path: object, offset: int, message: str) -> None:
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{self.path} @ byte {offset}: {message}")


class ConfigSchemaError(LrlcError, ValueError):
    """An experiment config failed validation; carries every violation."""

    def __init__(self, violations: Iterable[str]) -> None:
        self.violations: List[str] = list(violations)
        lines = "\n".join(f"  - {item}" for item in self.violations)
        super().__init__(f"{len(self.violations)} config violation(s):\n{lines}")
