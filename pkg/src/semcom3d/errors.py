"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    pass


class NotFoundError(KeyError):
    def __str__(self):
        # KeyError repr-quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class FormatError(ValueError):
    """Malformed on-disk artifact. ``path`` names the offending file."""

    def __init__(self, message, path=None):
        super().__init__(message if path is None else f"{path}: {message}")
        self.path = path


class NumericError(ArithmeticError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class TrainingError(RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, message, epoch=None):
        super().__init__(message if epoch is None else f"epoch {epoch}: {message}")
        self.epoch = epoch


class SingularChannelError(ArithmeticError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name and config hash."""

    def __init__(self, stage, config_hash, cause):
        super().__init__(f"stage '{stage}' failed (config {config_hash}): {cause}")
        self.stage = stage
        self.config_hash = config_hash
        self.cause = cause
