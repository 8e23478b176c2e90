"""Exception hierarchy; every error carries the process exit code the CLI uses."""

from typing import Optional, Sequence


class FairshareError(Exception):
    """Base class for all library errors"""

    exit_code = 3


class UsageError(FairshareError):
    """Command line misuse"""

    exit_code = 1


class InvalidInputError(FairshareError):
    """Input violates a construction invariant"""

    exit_code = 2


class DimensionError(InvalidInputError):
    pass


class ScenarioError(InvalidInputError):
    pass


class SpectralRadiusError(InvalidInputError):
    """Routing matrix could not be certified substochastic with radius < 1"""

    def __init__(self, message: str, radius: float):
        super().__init__(message)
        self.radius = radius


class NumericalError(FairshareError):
    exit_code = 3


class SolverError(NumericalError):
    """Allocation solver stopped without a KKT certificate"""

    def __init__(self, message: str, iterations: int = 0, residual: float = float("nan")):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class AllocatorError(NumericalError):
    """Allocator failed at a visited state"""

    def __init__(self, message: str, state: Optional[Sequence[float]] = None):
        super().__init__(message)
        self.state = tuple(state) if state is not None else None


class FluidStepError(NumericalError):
    pass


class ReducibleChainError(NumericalError):
    pass


class ResourceBudgetError(NumericalError):
    pass
