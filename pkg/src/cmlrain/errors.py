"""Exception hierarchy shared by every stage of the pipeline.

Each family maps onto one CLI exit code: configuration problems exit with 2,
data problems with 3 and numeric divergence with 4.
"""


class CmlRainError(Exception):
    exit_code = 1


class ConfigInvalid(CmlRainError, ValueError):
    exit_code = 2


class DataError(CmlRainError, ValueError):
    exit_code = 3


class NumericError(CmlRainError, ArithmeticError):
    exit_code = 4


# ingest
class MalformedHeader(DataError):
    pass


class NonMonotonicTimestamps(DataError):
    pass


class EmptyFile(DataError):
    pass


class ResolutionViolation(DataError):
    pass


class MissingInput(DataError):
    pass


# preprocess
class WrongStep(DataError):
    pass


class TooSparse(DataError):
    pass


class EmptyColumn(DataError):
    pass


class OverlappingSplits(ConfigInvalid):
    pass


class BufferTooSmall(ConfigInvalid):
    pass


class EmptySplit(DataError):
    pass


# autodiff / model
class ShapeMismatch(CmlRainError, ValueError):
    exit_code = 2


class InvalidAxis(ShapeMismatch):
    pass


class NonScalarLoss(ShapeMismatch):
    pass


class LengthMismatch(ShapeMismatch):
    pass


class SpecMismatch(ShapeMismatch):
    pass


class DivergedLoss(NumericError):
    pass


# power-law baseline
class WindowTooLong(ConfigInvalid):
    pass


class NoDryPeriod(DataError):
    pass


class MissingCoefficient(ConfigInvalid):
    pass


class IoFailure(CmlRainError, OSError):
    exit_code = 3
