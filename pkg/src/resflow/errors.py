"""Exception types shared across the package."""


class ContractError(ValueError):
    """An argument violates a documented precondition (shape, range, size)."""


class DomainError(ArithmeticError):
    """The right-hand side produced a non-finite value at the given state."""


class IntegrationError(RuntimeError):
    """Time integration could not reach the requested time."""

    def __init__(self, message, last_time=None, index=None):
        super().__init__(message)
        self.last_time = last_time
        self.index = index


class ParseError(ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(ValueError):
    """Loaded or assembled data violates an invariant."""


class UsageError(ValueError):
    """An operation was requested in a mode the model does not support."""


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch, batch, loss_trace):
        self.epoch = epoch
        self.batch = batch
        self.loss_trace = list(loss_trace)
        tail = ", ".join(f"{v:.3e}" for v in self.loss_trace[-5:])
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch}; recent losses: [{tail}]"
        )
