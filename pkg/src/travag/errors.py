"""Exception hierarchy shared by all travag modules."""


class TravagError(Exception):
    """Base class for every error raised by this package."""


class FormatError(TravagError):
    """Input file does not follow the expected layout."""


class EmptyLogError(TravagError):
    """An event log without any case was supplied or produced."""


class RowError(FormatError):
    """A single input row could not be interpreted."""

    def __init__(self, line: int, message: str, source: str = "<stream>"):
        self.line = line
        self.source = source
        super().__init__(f"{source}:{line}: {message}")


class NumericalError(TravagError):
    """A NaN or infinity showed up in a forward or backward pass."""


class DivergenceError(NumericalError):
    """Training produced a non-finite loss."""


class PrivacyError(TravagError):
    """A privacy budget is invalid, vacuous or cannot be met."""


class CalibrationError(PrivacyError):
    """No noise multiplier in the search bracket reaches the target epsilon."""


class ConfigError(TravagError):
    """Configuration document failed validation."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
