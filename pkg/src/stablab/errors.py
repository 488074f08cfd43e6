"""Exception types shared across the package."""


class InputError(ValueError):
    """Raised when an argument violates an operation's preconditions."""


class ConvergenceError(RuntimeError):
    """Raised when an iterative solver exhausts its budget.

    Carries the last residual so callers can decide whether the partial
    answer is usable.
    """

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual
