# app/errors.py
"""
Module: errors.py

Exception types raised by the training engine. Each one also derives from the
builtin exception a caller would naturally catch for the same situation, so
``except ValueError`` keeps working for shape and format problems.

The command-line front end maps these onto exit codes:

- validation problems (``ValueError`` family) -> 2
- IO problems (``OSError`` family) -> 3
- ``NumericalError`` -> 4
"""


class SSDAError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(SSDAError, ValueError):
    """Raised when tensor shapes are incompatible for an operation."""

    def __init__(self, op: str, left, right=None):
        self.op = op
        self.left = tuple(left) if left is not None else None
        self.right = tuple(right) if right is not None else None
        if right is None:
            message = f"{op}: invalid shape {self.left}"
        else:
            message = f"{op}: incompatible shapes {self.left} and {self.right}"
        super().__init__(message)


class NumericalError(SSDAError, ArithmeticError):
    """Raised in strict mode when an operation produces NaN or infinity."""

    def __init__(self, op: str):
        self.op = op
        super().__init__(f"non-finite value produced by {op}")


class IDXFormatError(SSDAError, ValueError):
    """Raised when an IDX file has a bad magic number, is truncated, or disagrees with its pair."""


class LabelLeakageError(SSDAError, ValueError):
    """Raised when target-domain labels reach the training step."""


class TemplateMismatchError(SSDAError, ValueError):
    """Raised when loss weights contradict the declared method template."""


class ReportFormatError(SSDAError, ValueError):
    """Raised when a metrics CSV cannot be parsed; carries the 1-based line number."""

    def __init__(self, path: str, line: int, reason: str):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {reason}")


class DatasetNotFoundError(SSDAError, FileNotFoundError):
    """Raised when a dataset directory is missing one of its files."""
