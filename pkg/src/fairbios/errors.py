"""Exception hierarchy.

Every error raised deliberately by the package derives from
:class:`FairBiosError`; the CLI maps :class:`DataError` to exit code 2 and
:class:`NumericError` to exit code 3.
"""


class FairBiosError(Exception):
    pass


class DataError(FairBiosError, ValueError):
    """Input data is missing, malformed or inconsistent."""


class NumericError(FairBiosError, ArithmeticError):
    """A computation produced a non-finite or otherwise unusable value."""


class SchemaMismatch(DataError):
    pass


class MalformedRow(DataError):
    def __init__(self, line_no, reason):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class GenderCardinality(DataError):
    pass


class EmptyInput(DataError):
    pass


class BadRatios(DataError):
    pass


class TooFewRecords(DataError):
    pass


class LabelOutOfRange(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class EmptyData(DataError):
    pass


class NonFiniteLoss(NumericError):
    pass


class EmptyClassList(DataError):
    pass


class MissingClass(DataError):
    pass


class GroupMissingClass(DataError):
    pass


class UnknownGroup(DataError):
    pass


class LengthMismatch(DataError):
    pass


class SingleGroup(DataError):
    pass


class NoPositives(DataError):
    pass


class NoNegatives(DataError):
    pass


class NonProbabilisticScores(DataError):
    pass


class BadConfig(DataError):
    pass


class FeaturizerMismatch(DataError):
    """A checkpoint was produced under a different featurizer configuration."""
