"""Exception hierarchy shared by all modules."""


class OdeMarkovError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(OdeMarkovError, ValueError):
    """Malformed or inconsistent user input."""


class DimensionMismatch(ConfigError):
    pass


class OutOfRange(ConfigError):
    pass


class StochasticityError(ConfigError):
    """The transition matrix is not row-stochastic."""


class RowSumDefect(StochasticityError):
    pass


class NegativeProbability(StochasticityError):
    pass


class ParseError(ConfigError):
    pass


class ValidationError(ConfigError):
    """A loaded chain failed validation; ``report`` holds the diagnostics."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class NumericalError(OdeMarkovError, ArithmeticError):
    """Base class for failures of a numerical routine."""


class SingularSystem(NumericalError):
    pass


class CapacityExceeded(NumericalError):
    pass


class ConvergenceFailure(NumericalError):
    pass


class NotDominant(NumericalError):
    pass


class HypothesisViolated(NumericalError):
    """A hypothesis of an analytic formula (e.g. real distinct eigenvalues) does not hold."""


class FitFailure(NumericalError):
    def __init__(self, message, alpha=None, residual=None):
        super().__init__(message)
        self.alpha = alpha
        self.residual = residual


class UnstableGain(NumericalError):
    pass


class NoConvergence(NumericalError):
    pass


class SingularJacobian(NumericalError):
    pass


class Blowup(NumericalError):
    pass
