"""Exception hierarchy shared by all candle modules.

Each class maps to one CLI exit code: ParameterError -> 2 (usage),
ValidationError / FormatError / DegenerateVectorError / CoverageError /
ProtocolError -> 3 (bad data), NumericalError -> 4.
"""


class CandleError(Exception):
    """Base class for all toolkit errors."""


class ParameterError(CandleError):
    """An argument value violates a precondition."""


class ValidationError(CandleError):
    """A data structure violates one of its invariants; message names the field."""


class FormatError(CandleError):
    """A serialized byte stream is malformed; message includes the byte offset."""


class DegenerateVectorError(CandleError):
    """A vector that must have nonzero norm collapsed (zero row, dead projection)."""


class CoverageError(CandleError):
    """A class that must have samples has none; message names the class."""


class ProtocolError(CandleError):
    """An evaluation protocol precondition failed (empty class, empty split)."""


class NumericalError(CandleError):
    """A nonfinite value appeared where finite math was required."""
