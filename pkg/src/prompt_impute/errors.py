"""Exception types shared across the package."""


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class NumericError(ArithmeticError):
    pass


class ParseError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InvalidInputError(ValueError):
    pass


class StratificationError(ValueError):
    pass


class UndefinedMetricError(ValueError):
    pass


class DivergedRunError(RuntimeError):
    def __init__(self, epoch, batch, loss):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
