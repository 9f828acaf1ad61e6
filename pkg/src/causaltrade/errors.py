"""Exception hierarchy.

Data problems (bad input files, too-short panels) derive from ``DataError``;
numerical breakdowns derive from ``NumericError``.  The CLI maps the two
families to exit codes 2 and 3.
"""


class CausalTradeError(Exception):
    """Base class for all package errors."""


class DataError(CausalTradeError):
    pass


class NumericError(CausalTradeError):
    pass


class MalformedRow(DataError):
    pass


class DuplicateDate(DataError):
    pass


class NonPositivePrice(DataError):
    pass


class EmptyPanel(DataError):
    pass


class PanelTooShort(DataError):
    pass


class TickerMismatch(DataError):
    pass


class MissingHistory(DataError):
    pass


class EndOfData(DataError):
    pass


class FetchError(DataError):
    pass


class SingularDesign(NumericError):
    pass


class LiNGAMError(NumericError):
    pass


class StationarityError(NumericError):
    pass


class Bankrupt(NumericError):
    """A daily return of -100% or worse wiped out the compounded notional."""

    def __init__(self, index, value):
        super().__init__(f"return {value!r} at position {index} is <= -1")
        self.index = index
        self.value = value


class BudgetExceeded(CausalTradeError, TimeoutError):
    pass


class MemoryLimit(CausalTradeError, MemoryError):
    pass
