"""Exception hierarchy shared by all hessolve modules."""


class HessolveError(Exception):
    """Base class for every error raised by this package."""


class StructuralError(HessolveError):
    """A stored block does not have the dimensions its position demands."""


class CapabilityError(HessolveError):
    """The generator cannot answer a request (e.g. an infinite tail with no hook)."""


class QueryError(HessolveError):
    """A block was requested outside the range the generator can describe."""


class ModelError(HessolveError):
    """The chain (or a finite prefix of it) violates a modelling assumption.

    Raised for singular censored blocks, i.e. truncations from which the
    process cannot leave.
    """

    def __init__(self, message, level=None):
        super().__init__(message)
        self.level = level


class NumericalBreakdown(HessolveError):
    """Floating-point results left the region where the recursion is meaningful."""

    def __init__(self, message, level=None):
        super().__init__(message)
        self.level = level


class SpecError(HessolveError, ValueError):
    """Model parameters are malformed or violate their declared invariants."""


class StabilityError(SpecError):
    """The requested queue is not positive recurrent (load >= 1)."""


class CertificateError(HessolveError):
    """A drift certificate could not be constructed."""


class ModelFileError(HessolveError):
    """Syntax or semantic problem in a model file; carries the 1-based line."""

    def __init__(self, message, line=None, report=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
        self.report = report


class ContractError(HessolveError, ValueError):
    """An argument violates the documented precondition of a call."""
