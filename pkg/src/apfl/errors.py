"""Exception types shared across the package."""


class RejectedInput(ValueError):
    """An argument violates an operation's precondition."""


class DivergedTraining(ArithmeticError):
    """Local training produced a non-finite loss."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")


class DivergedPredictor(ArithmeticError):
    """The broadcast predictor produced a non-finite loss."""


class StaleAction(RuntimeError):
    """A refinement action references clusters that no longer exist.

    Retriable: recompute the actions against the current state.
    """

    retriable = True


class ConfigError(ValueError):
    """Configuration could not be parsed or validated."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        self.key = key
        self.line = line
        where = []
        if key is not None:
            where.append(f"key '{key}'")
        if line is not None:
            where.append(f"line {line}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
