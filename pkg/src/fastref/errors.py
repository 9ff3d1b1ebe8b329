"""Exception hierarchy shared across the package.

Everything raised on purpose derives from :class:`FastrefError`, so callers
(notably the CLI) can distinguish data problems from genuine bugs.
"""

from __future__ import annotations


class FastrefError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(FastrefError, ValueError):
    """An argument violates a documented precondition (shape, range, emptiness)."""


class NonFiniteError(InvalidInputError):
    """A payload or intermediate contains NaN or Inf where finiteness is required."""


class TensorFormatError(FastrefError, ValueError):
    """Base class for FTZ parse failures."""


class BadMagicError(TensorFormatError):
    """File does not start with the FTZ magic bytes."""


class UnsupportedVersionError(TensorFormatError):
    """Header declares a format version this reader does not handle."""


class UnsupportedDtypeError(TensorFormatError):
    """Header declares a payload dtype other than little-endian f32."""


class BadRankError(TensorFormatError):
    """Header rank is outside the supported {2, 3}."""


class InvalidDimsError(TensorFormatError):
    """A declared dimension is zero."""


class DimsOverflowError(TensorFormatError):
    """Declared dimensions multiply out to an implausible payload size."""


class TruncatedPayloadError(TensorFormatError):
    """Payload is shorter than the header-declared element count requires."""


class TrailingDataError(TensorFormatError):
    """Payload is longer than the header-declared element count requires."""


class SingularMatrixError(FastrefError):
    """A Gram matrix could not be factorized (and no ridge was requested)."""


class DegenerateKernelError(FastrefError):
    """exp(-C/eps) underflowed an entire row or column beyond what log-domain
    arithmetic can represent; the Sinkhorn scaling problem has no finite answer."""


class UnsupportedSizeError(FastrefError):
    """Input exceeds the size limit of an exact small-instance routine."""


class NonConvergenceError(FastrefError):
    """An iterative solver hit its iteration cap before reaching tolerance."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class UndefinedMetricError(FastrefError):
    """A metric (e.g. AUROC) is undefined for the given inputs."""
