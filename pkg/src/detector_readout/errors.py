"""Exception hierarchy shared by all modules."""


class ReadoutError(Exception):
    """Base class for every error raised by this package."""


class ParameterError(ReadoutError, ValueError):
    """A parameter lies outside its allowed domain."""


class StatisticsError(ReadoutError, ValueError):
    """Bosonic/fermionic statistics of inputs do not match."""


class DomainError(ReadoutError, ValueError):
    """An imaginary time lies outside the range an operation accepts."""


class ResolutionError(ReadoutError, ValueError):
    """A tau mesh is too coarse for the requested Matsubara frequencies."""


class SpecMismatchError(ReadoutError, ValueError):
    """A spec of the wrong kind was handed to an operation."""


class SingularResummationError(ReadoutError, ArithmeticError):
    """A Dyson denominator came too close to zero."""

    def __init__(self, message, n=None):
        super().__init__(message)
        self.n = n


class ExtractionError(ReadoutError, ArithmeticError):
    """Simulator correlator extraction is undefined for the given input."""

    def __init__(self, message, n=None):
        super().__init__(message)
        self.n = n


class DimensionError(ReadoutError, ValueError):
    """Hilbert space exceeds the configured dimension budget."""

    def __init__(self, message, dimension=None):
        super().__init__(message)
        self.dimension = dimension


class ConvergenceError(ReadoutError, RuntimeError):
    """Boson truncation did not converge within tolerance."""


class DegenerateTimeError(ReadoutError, ValueError):
    """Coincident imaginary times make time ordering ambiguous."""


class ContinuationError(ReadoutError, ArithmeticError):
    """Analytic continuation failed its fit-quality gate or overflowed."""

    def __init__(self, message, max_deviation=None):
        super().__init__(message)
        self.max_deviation = max_deviation


class ConfigError(ReadoutError, ValueError):
    """A scenario config violates its schema."""

    def __init__(self, message, path=None, line=None, column=None):
        super().__init__(message)
        self.path = path
        self.line = line
        self.column = column
