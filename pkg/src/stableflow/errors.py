"""Exception hierarchy.

Each error carries the CLI exit code it maps to: 1 for bad data, 2 for
numerical failure, 3 for file problems.
"""


class StableFlowError(Exception):
    exit_code = 1


class DataError(StableFlowError):
    exit_code = 1


class DegenerateExtent(DataError):
    pass


class TooShort(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class LengthMismatch(DataError):
    pass


class EmptySequence(DataError):
    pass


class EmptyBatch(DataError):
    pass


class NumericError(StableFlowError):
    exit_code = 2


class NonFinite(NumericError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class GoalSingularity(NumericError):
    pass


class AtGoal(NumericError):
    pass


class FileFormatError(StableFlowError):
    exit_code = 3


class CorruptFile(FileFormatError):
    pass


class VersionMismatch(FileFormatError):
    pass
