"""Exception taxonomy shared across the package.

Process exit codes: 0 success, 2 configuration error, 3 infeasible,
4 numerical failure.
"""


class RccmError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigurationError(RccmError):
    """Bad names, dimensions, options, or input files."""

    exit_code = 2


class DimensionError(ConfigurationError):
    """Array argument has the wrong shape for the model at hand."""


class ValidationError(ConfigurationError):
    """Input data fails a declared invariant (e.g. dynamics residual)."""


class StructuralError(ConfigurationError):
    """A structural (Killing-type) requirement cannot be expressed or holds
    only in conflict with the requested basis."""

    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class InfeasibleError(RccmError):
    """A semidefinite problem admits no strictly feasible point."""

    exit_code = 3

    def __init__(self, message, labels=()):
        super().__init__(message)
        self.labels = tuple(labels)


class TighteningInfeasibleError(InfeasibleError):
    """Constraint tightening emptied a box along some dimension."""

    def __init__(self, message, dimension):
        super().__init__(message)
        self.dimension = dimension


class NumericalError(RccmError):
    """Solver or integrator failure."""

    exit_code = 4


class NonconvergenceError(NumericalError):
    """Iteration limit hit; carries the last iterate for diagnosis."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class MetricDomainError(NumericalError):
    """W(x) is not positive definite at the point where M = W^-1 was needed."""

    def __init__(self, message, x=None):
        super().__init__(message)
        self.x = None if x is None else tuple(float(v) for v in x)


class ControllabilityError(NumericalError):
    """The min-norm control constraint has a vanishing input coefficient but a
    positive constant part."""
