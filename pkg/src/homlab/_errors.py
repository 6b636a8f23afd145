from __future__ import annotations
from typing import Any, List, Optional, Sequence, TypedDict, Type
import warnings


class HomlabError(Exception):
    pass


class InvalidInputError(HomlabError, ValueError):
    """Raised when an input violates a precondition of an operation."""


class NonConvergenceError(HomlabError, RuntimeError):
    """Raised when a Krylov iteration exhausts its iteration cap."""

    def __init__(self, message: str, history: Optional[Sequence[float]] = None):
        super().__init__(message)
        self.history: List[float] = list(history or [])


class RunRejectedError(HomlabError, RuntimeError):
    pass


class AcceptanceError(HomlabError, AssertionError):
    def __init__(self, criterion: str, message: str):
        super().__init__(f"{criterion}: {message}")
        self.criterion = criterion


class HomlabWarning(UserWarning):
    pass


class ClippedSpectrumWarning(HomlabWarning):
    pass


class PecletWarning(HomlabWarning):
    pass


class ResolutionWarning(HomlabWarning):
    pass


class WarningRecord(TypedDict):
    source: str
    message: str
    value: Any


def warning_record(
    source: str,
    message: str,
    value: Any = None,
    category: Type[HomlabWarning] = HomlabWarning,
    emit: bool = True,
) -> WarningRecord:
    """Builds a warning record and, unless disabled, mirrors it via warnings.warn."""
    if emit:
        warnings.warn(f"{source}: {message}", category, stacklevel=3)
    return WarningRecord(source=source, message=message, value=value)


__all__ = [
    "HomlabError",
    "InvalidInputError",
    "NonConvergenceError",
    "RunRejectedError",
    "AcceptanceError",
    "HomlabWarning",
    "ClippedSpectrumWarning",
    "PecletWarning",
    "ResolutionWarning",
    "WarningRecord",
    "warning_record",
]
