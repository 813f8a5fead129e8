"""Exception hierarchy. The CLI maps each class to a distinct exit code."""


class EESimError(Exception):
    """Base class for all errors raised by this package."""


class GraphError(EESimError):
    """Structurally invalid model graph (cycle, unreachable output, ...)."""


class ValidationError(EESimError):
    """Trace or profile content that violates a documented invariant."""


class ParameterError(EESimError):
    """Operation parameters outside their documented domain."""


class GridCapError(EESimError):
    """Grid search refused: the lattice would exceed the configured cap."""
