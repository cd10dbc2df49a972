"""Exception hierarchy shared by every stage of the pipeline.

Each class carries the CLI exit code for its category so the command layer
can map failures without inspecting messages.
"""


class TriageError(Exception):
    """Base class for all package errors."""

    exit_code = 1
    category = "error"


class UsageError(TriageError):
    exit_code = 2
    category = "usage"


class SlideIOError(TriageError):
    """Missing or unreadable files (metadata, tiles, checkpoints)."""

    exit_code = 3
    category = "io"


class DataInvariantError(TriageError, ValueError):
    """Input data violates a documented invariant."""

    exit_code = 4
    category = "data-invariant"


class NumericError(TriageError, ArithmeticError):
    """A NaN/Inf escaped an operation, or training diverged."""

    exit_code = 5
    category = "numeric"
