"""Exception types raised by the toolkit."""


class CtmcError(Exception):
    """Base class for all toolkit errors."""


class ModelError(CtmcError):
    """Raised when a generator cannot be built from the supplied parameters."""


class ConfigurationError(CtmcError):
    """Raised for incompatible arguments (windows, grids, methods)."""


class InvariantError(CtmcError):
    """Raised when a structural invariant of an object is violated."""


class SolverError(CtmcError):
    """Raised when a numerical solver cannot deliver a trustworthy answer."""


class ModelFileError(CtmcError):
    """Raised when a model file cannot be parsed.

    The message carries the offending field or line.
    """
