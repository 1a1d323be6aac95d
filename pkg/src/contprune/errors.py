"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible or malformed shapes."""


class InputError(ValueError):
    """Invalid user-supplied data (tokens, files, ranges)."""


class FormatError(ValueError):
    """A serialized artifact (checkpoint, state file) is malformed."""


class UsageError(ValueError):
    """An operation was invoked with an inconsistent configuration."""


class NumericalError(ArithmeticError):
    """A numerical routine failed (non-convergence, rank deficiency)."""


class TrainingError(RuntimeError):
    """Training diverged or produced non-finite values."""


class CompletenessError(ValueError):
    """An aggregate was requested over an incomplete cell grid."""
