"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so each class belongs to exactly one
family: validation/format problems (exit 2) or numeric/degenerate ones (exit 3).
"""


class MergeLabError(Exception):
    """Base class for all library errors."""


class ArgumentError(MergeLabError, ValueError):
    """A caller passed arguments that violate an operation's preconditions."""


class FormatError(MergeLabError):
    """A tensor container or input file is malformed."""


class DtypeError(FormatError):
    """A tensor container uses a dtype this library does not handle."""


class ValidationError(MergeLabError):
    """Decoded data violates an invariant (e.g. non-finite values)."""


class MismatchError(ValidationError):
    """Two checkpoints are not merge-compatible."""

    def __init__(self, message: str, mismatches: list[str] | None = None):
        super().__init__(message)
        self.mismatches = list(mismatches or [])


class SchemaError(ValidationError):
    """A recipe, config, or CSV does not follow its documented schema."""


class DegenerateError(MergeLabError, ArithmeticError):
    """A quantity is mathematically undefined for the given input."""


class TrainingError(DegenerateError):
    """Toy-model training diverged (non-finite loss)."""
