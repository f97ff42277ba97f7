"""Exception hierarchy shared by all modules."""


class FuncProcError(Exception):
    """Base class for every error raised by this package."""


class DomainError(FuncProcError, ValueError):
    """Input outside the mathematical domain of an operation."""


class LabelLookupError(FuncProcError, KeyError):
    """A variable label is not part of the layout it was looked up in."""

    def __str__(self):
        return str(self.args[0]) if self.args else "unknown label"


class CompositionError(FuncProcError, ValueError):
    """Two functionals cannot be combined (incompatible grids or slots)."""


class SingularMarginalError(FuncProcError, ArithmeticError):
    """Gaussian integration block is singular or ill-conditioned."""

    def __init__(self, message, condition_number=float("nan")):
        super().__init__(message)
        self.condition_number = condition_number


class DivergentIntegralError(SingularMarginalError):
    """The integrated Gaussian grows along some real direction."""


class NumericRangeError(FuncProcError, OverflowError):
    """An exponent is too large to be evaluated in double precision."""


class InvariantError(FuncProcError, ValueError):
    """A domain type invariant is violated."""


class ValidityError(FuncProcError, ArithmeticError):
    """A numerical result is not a valid probability law."""


class BVPSingularError(FuncProcError, ArithmeticError):
    """The discretized boundary-value operator is singular."""


class AssemblyError(FuncProcError, ArithmeticError):
    """The boundary matrix of the saddle assembly is singular."""


class PreconditionError(FuncProcError, ValueError):
    """An operation was called outside its precondition."""


class ConstancyError(PreconditionError):
    """A functional is not constant on an interval where it must be."""


class SizeLimitError(FuncProcError, MemoryError):
    """A dense operator model exceeds the supported size."""


class ConfigError(FuncProcError, ValueError):
    """An experiment configuration cannot be parsed or resolved."""
