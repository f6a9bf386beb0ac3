"""Exception types shared by the lawnarea modules.

Every error the package raises on purpose derives from LawnAreaError, so the
command line can tell expected failures (bad input, unreadable files,
diverged training) from programming errors.
"""


class LawnAreaError(Exception):
    """Base class for all expected lawnarea failures."""


class InvalidArgument(LawnAreaError, ValueError):
    """An argument violates an operation's precondition."""


class ShapeError(InvalidArgument):
    """Tensor or image shapes do not fit together."""


class InvalidState(LawnAreaError, RuntimeError):
    """An object is not in the state an operation requires."""


class ConfigError(LawnAreaError, ValueError):
    """A config, grid or results file could not be understood."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


class ManifestParseError(LawnAreaError, ValueError):
    """A manifest row is malformed."""

    def __init__(self, message, path, line):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class DatasetIOError(LawnAreaError, OSError):
    """An image or manifest file could not be read or written."""

    def __init__(self, message, path):
        self.path = path
        super().__init__(f"{path}: {message}")

    def __str__(self):
        return self.args[0]


class CheckpointError(LawnAreaError, ValueError):
    """A checkpoint file is corrupt or from an unknown format version."""

    def __init__(self, reason, path):
        self.reason = reason
        self.path = path
        super().__init__(f"{path}: {reason}")


class DivergedError(LawnAreaError, ArithmeticError):
    """Training produced a non-finite loss.

    ``batch`` is the batch index, or ``"validation"`` when the validation MSE
    of an epoch was the non-finite value.
    """

    def __init__(self, epoch, batch, loss):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        where = "validation" if batch == "validation" else f"batch {batch}"
        super().__init__(f"training diverged at epoch {epoch}, {where} (loss={loss})")
