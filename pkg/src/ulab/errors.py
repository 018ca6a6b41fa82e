"""Exception hierarchy shared across the package."""


class UlabError(Exception):
    """Base class for all errors raised by ulab."""


class ConfigError(UlabError, ValueError):
    """Invalid architecture, hyperparameter or experiment configuration."""


class ShapeError(UlabError, ValueError):
    """Input dimensions do not match the model or each other."""


class UsageError(UlabError, ValueError):
    """Operation called with inputs it cannot work on (empty sets etc.)."""


class DivergenceError(UlabError, ArithmeticError):
    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss encountered in epoch {epoch}")


class FormatError(UlabError, ValueError):
    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


class DegenerateMassError(UlabError, ValueError):
    """The forget class holds (numerically) all of the probability mass."""


class DegenerateGeometryError(UlabError, ValueError):
    """A projected class weight vector has zero norm."""


class OutOfHullError(UlabError, ValueError):
    """Moment target lies outside the open convex hull of the scores."""


class InvalidInputError(UlabError, ValueError):
    pass
