"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called outside its documented preconditions."""


class NumericalFailure(RuntimeError):
    """A numerical routine failed (decomposition, non-convergence, ...)."""


class OptimizationError(NumericalFailure):
    """Optimizer did not converge; ``best`` holds the best point found."""

    def __init__(self, message, best=None, objective=None):
        super().__init__(message)
        self.best = best
        self.objective = objective
