"""Exception types shared across the toolkit."""


class DimensionError(ValueError):
    """Array shapes do not match the model or network dimensions."""


class IntegrationError(ArithmeticError):
    """A fixed-step integration produced non-finite values."""


class ControllerError(RuntimeError):
    """The MPC law could not produce an input (solver did not converge)."""

    def __init__(self, message, residual=None, status=None, step=None):
        super().__init__(message)
        self.residual = residual
        self.status = status
        self.step = step


class GenerationError(RuntimeError):
    """Too many OCP solves failed while labelling a dataset."""


class BoundInfeasibleError(ValueError):
    """The training error already exceeds the requested bound."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


class DatasetFormatError(ValueError):
    """A dataset file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(ValueError):
    """The run configuration is invalid."""
