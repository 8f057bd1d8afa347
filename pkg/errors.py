"""
Exception hierarchy shared by every shiftedit module.

Each error carries a human-readable ``detail``.
"""

from typing import Optional


class ShiftEditError(Exception):
    """Base class for all shiftedit errors."""

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class UsageError(ShiftEditError):
    """Caller passed arguments that violate an operation's preconditions."""


class DimensionError(UsageError):
    """Operand shapes do not conform."""


class NumericalError(ShiftEditError):
    """A primitive op produced NaN or Inf."""


class TrainingError(ShiftEditError):
    """Base training diverged."""

    def __init__(self, detail: str, step: Optional[int] = None):
        super().__init__(detail)
        self.step = step


class EditError(ShiftEditError):
    """An edit run diverged (non-finite loss or parameters)."""

    def __init__(self, detail: str, step: Optional[int] = None):
        super().__init__(detail)
        self.step = step


class FormatError(ShiftEditError):
    """A checkpoint or dataset container is corrupt or truncated."""


class IncompatibleVersionError(FormatError):
    """Container was written by an unsupported format version."""


class ReportError(ShiftEditError):
    """Report output directory cannot be written."""
