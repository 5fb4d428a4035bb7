"""Exception hierarchy shared by all sectorfield modules."""


class SectorFieldError(Exception):
    """Base class for all errors raised by this package."""


class PoleError(SectorFieldError):
    """A gamma/digamma factor sits on (or too close to) a pole."""


class DomainError(SectorFieldError):
    """Argument outside the mathematical domain of the operation."""


class ConvergenceError(SectorFieldError):
    """A series / quadrature evaluation failed to reach its tolerance."""


class SingularError(SectorFieldError):
    """A denominator is below its floor; the quantity is reported singular."""


class RegimeError(SectorFieldError):
    """A closed-form case was requested outside its validity regime."""


class NoSolutionError(SectorFieldError):
    """A calibration equation has no root (mis-specified scenario)."""


class NonConvergenceError(SectorFieldError):
    """The self-consistent solver ran out of iterations.

    Carries the final residual so callers can decide whether to retry
    from a different seed.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ParseError(SectorFieldError):
    """Scenario file could not be parsed; carries the offending line number."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class ValidationError(SectorFieldError):
    """A scenario invariant is violated; carries the offending field name."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
