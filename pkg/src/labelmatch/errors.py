"""Exception hierarchy shared by every module."""


class LabelMatchError(Exception):
    """Base class for all errors raised by the package."""


class InputFormatError(LabelMatchError):
    """Malformed user input (bad boxes, bad files, out-of-range values)."""


class InvariantViolation(LabelMatchError):
    """An internal consistency check failed."""


class DegenerateBox(InputFormatError):
    pass


class NonFinite(InputFormatError):
    pass


class InvalidThreshold(InputFormatError):
    pass


class EmptyDataset(InputFormatError):
    pass


class DimensionMismatch(InputFormatError):
    pass


class UnsortedScores(InputFormatError):
    pass


class InvalidAlpha(InputFormatError):
    pass


class EmptyQueue(LabelMatchError):
    pass


class MissingClassThreshold(InputFormatError):
    pass


class OracleFailure(LabelMatchError):
    pass


class IndexOutOfRange(InputFormatError):
    pass


class InvalidBeta(InputFormatError):
    pass


class MisalignedBatch(InputFormatError):
    pass


class ConfigInvalid(InputFormatError):
    pass


class ParseError(InputFormatError):
    """JSON/config parse failure; ``line`` and ``column`` locate the problem."""

    def __init__(self, message, path=None, line=None, column=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}:{column}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line
        self.column = column


class DanglingReference(InputFormatError):
    pass


class NonPositiveBox(InputFormatError):
    pass


class ScoreOutOfRange(InputFormatError):
    pass
