"""Exception hierarchy shared by every locood module."""


class LocoodError(Exception):
    """Base class for all package errors."""


class ValidationError(LocoodError, ValueError):
    """Input failed a precondition (non-finite values, bad probability vector...)."""


class ShapeError(ValidationError):
    """Input has the wrong dimension."""


class ConfigError(LocoodError, ValueError):
    """Invalid configuration or parameter combination."""


class TrainingDivergedError(LocoodError, FloatingPointError):
    def __init__(self, epoch, message="loss became NaN"):
        super().__init__(f"{message} at epoch {epoch}")
        self.epoch = epoch


class FitError(LocoodError):
    """A scorer could not be fitted on the supplied data."""


class NumericalError(LocoodError, ArithmeticError):
    pass


class SplitError(LocoodError, ValueError):
    pass


class CellError(LocoodError):
    pass


class TuningError(LocoodError):
    def __init__(self, message, diagnostics=()):
        super().__init__(message)
        self.diagnostics = list(diagnostics)


class MetricError(LocoodError, ValueError):
    pass


class DataFormatError(LocoodError):
    """Base for on-disk dataset format problems."""


class MagicVersionError(DataFormatError):
    pass


class SizeMismatchError(DataFormatError):
    pass


class LabelRangeError(DataFormatError):
    pass
