class RelcastError(Exception):
    """Base class for library errors."""


class DataError(RelcastError, ValueError):
    """Malformed dataset files or invalid data-level arguments."""


class RetrievalError(RelcastError, ValueError):
    """Retrieval is undefined for the given graph, target or window."""


class CheckpointMismatch(RelcastError):
    """A checkpoint does not match the requested model configuration."""


class TrainingDiverged(RelcastError, FloatingPointError):
    """The training loss became non-finite."""


class ConvergenceError(RelcastError, ArithmeticError):
    """An iterative solver hit its iteration cap."""
