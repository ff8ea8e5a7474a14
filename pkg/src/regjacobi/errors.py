"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """Raised on malformed input: wrong dimensions, non-PD weights, bad options."""


class InfeasibleSetError(ValueError):
    """Raised when a feasible set is empty.

    ``index`` carries the agent/vehicle index when the set belongs to a
    multi-agent problem.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class NumericalFailure(RuntimeError):
    """An inner solver hit its iteration cap or met a singular local problem."""

    def __init__(self, message, residual=float("nan"), index=None):
        super().__init__(message)
        self.residual = residual
        self.index = index
