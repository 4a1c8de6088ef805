"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid parameters, specs, or configuration files."""


class ShapeError(ValueError):
    """Input dimensions do not match the model or dataset."""


class ParseError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatVersionError(ConfigurationError):
    """A persisted file carries an unknown ``format_version``."""


class TrainingError(RuntimeError):
    def __init__(self, message, epoch=None, batch=None):
        self.epoch = epoch
        self.batch = batch
        if epoch is not None:
            message = f"{message} (epoch {epoch}, batch {batch})"
        super().__init__(message)


class BoundarySearchError(RuntimeError):
    """No decision flip was found, or the boundary geometry is degenerate."""

    def __init__(self, message, reason="boundary failure"):
        self.reason = reason
        super().__init__(message)
