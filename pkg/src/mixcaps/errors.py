"""Exception hierarchy shared by every mixcaps module.

Each class carries an ``exit_code`` so the command line can map failures to
distinct nonzero statuses.
"""


class MixcapsError(Exception):
    exit_code = 1


class DimensionError(MixcapsError, ValueError):
    exit_code = 3


class NumericError(MixcapsError, ArithmeticError):
    exit_code = 4


class ContractError(MixcapsError, ValueError):
    exit_code = 5


class DegenerateLikelihoodError(NumericError):
    exit_code = 6


class FormatError(MixcapsError):
    exit_code = 7


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class CountMismatchError(FormatError):
    pass


class ShapeMismatchError(FormatError):
    pass


class CorruptFileError(FormatError):
    pass


class MissingClassError(MixcapsError, ValueError):
    exit_code = 8


class TrainingDivergedError(NumericError):
    """Raised when the loss stops being finite; ``checkpoint`` is the last good state."""

    exit_code = 9

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class GradientCheckError(MixcapsError):
    exit_code = 10

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ConfigError(MixcapsError, ValueError):
    exit_code = 2
