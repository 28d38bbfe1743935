"""Exception and warning types shared across the package.

Errors carry an optional ``partial`` attribute so that a multi-stage
pipeline can attach whatever results were produced before the failure.
"""


class NetfactorError(Exception):
    """Base class for all package errors."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class ParameterError(NetfactorError, ValueError):
    """Invalid argument: dimension mismatch, bad option, bad configuration."""


class ParseError(NetfactorError, ValueError):
    """A data file could not be parsed; message includes the location."""


class NumericError(NetfactorError):
    """Numerical failure: non-convergence, non-finite objective, no usable spectrum."""


class DegeneracyError(NumericError):
    """Rank deficiency or a singular system where an invertible one is required."""


class TieError(NumericError):
    """Tied eigenvalues/elements where a condition requires distinct ones."""


class SelectionError(NumericError):
    """Dimension selection is impossible (e.g. a flat scree)."""


class DecompositionError(NumericError):
    """A probability matrix does not admit the required low-rank decomposition."""


class ResourceLimitError(NetfactorError):
    """A configured resource limit was exceeded."""


class NetfactorWarning(UserWarning):
    """Base class for package warnings."""


class SpectralGapWarning(NetfactorWarning):
    """The spectral gap at the requested embedding dimension is (near) zero."""


class DataWarning(NetfactorWarning):
    """A loader dropped or normalized some input (self-loops, duplicates, ...)."""
