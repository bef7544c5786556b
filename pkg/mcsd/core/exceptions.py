"""Exception hierarchy shared by services, pipeline and CLI."""


class McsdError(Exception):
    """Base class for toolkit errors."""


class ShapeError(McsdError, ValueError):
    """Operand dimensions do not agree."""


class NonFiniteError(McsdError, ValueError):
    """External input contains NaN or infinity."""


class UsageError(McsdError, ValueError):
    """An operation was called outside its contract."""


class ConfigError(McsdError, ValueError):
    """Run configuration is missing or invalid."""


class DatasetParseError(McsdError, ValueError):
    """A dataset file could not be parsed."""

    def __init__(self, message: str, line: int = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TrainingDivergedError(McsdError, ArithmeticError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(
            f"training diverged at epoch {epoch}, batch {batch}: loss={loss}"
        )
