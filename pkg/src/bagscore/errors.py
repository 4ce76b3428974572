"""Exception hierarchy shared by all modules."""


class BagScoreError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(BagScoreError, ValueError):
    pass


class InvalidBandwidthError(InvalidInputError):
    pass


class DegenerateSpreadError(InvalidInputError):
    pass


class UndefinedVarianceError(InvalidInputError):
    pass


class ZeroTargetError(InvalidInputError, ZeroDivisionError):
    """A true value of zero makes the percentage error undefined."""

    def __init__(self, row: int):
        super().__init__(f"true value is zero at row {row}; MAPE is undefined")
        self.row = row


class IngestionError(BagScoreError, ValueError):
    def __init__(self, message: str, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class TrainingDivergedError(BagScoreError, ArithmeticError):
    def __init__(self, epoch: int, seed=None, member=None):
        where = f" (seed {seed})" if seed is not None else ""
        if member is not None:
            where += f" [member {member}]"
        super().__init__(f"training diverged at epoch {epoch}{where}: loss is not finite")
        self.epoch = epoch
        self.seed = seed
        self.member = member


class ModelFormatError(BagScoreError, ValueError):
    pass
