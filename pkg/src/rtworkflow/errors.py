"""Exception types raised across the workflow."""


class WorkflowError(Exception):
    """Base class for all errors raised by this package."""


class OutOfSupportError(WorkflowError, ValueError):
    """A parameter lies outside the support of its prior."""


class BoundaryError(WorkflowError, ValueError):
    """A constrained value sits on the boundary of its space (sigma = 0, |rho| = 1)."""


class DensityUnderflowError(WorkflowError, ArithmeticError):
    """A log density evaluated to a non-finite value."""


class DesignError(WorkflowError, ValueError):
    """Invalid experimental design or dataset."""


class SamplerError(WorkflowError, RuntimeError):
    """The sampler could not initialise or adapt."""


class FitFailure(WorkflowError, RuntimeError):
    """Too many simulated fits failed in an ensemble stage."""


class ConvergenceError(WorkflowError, RuntimeError):
    """A bridge-sampling estimate did not converge."""


class DataParseError(WorkflowError, ValueError):
    """A data or draws file could not be parsed."""

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ConfigError(WorkflowError, ValueError):
    """One or more configuration fields are invalid."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))
