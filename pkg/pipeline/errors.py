# errors.py - Exception hierarchy for glr-sed
# Each family carries the exit code the CLI returns for it.


class SedError(Exception):
    exit_code = 2


# ---------------------------------------------------------------------------
# Usage errors (exit 1)
# ---------------------------------------------------------------------------

class UsageError(SedError):
    exit_code = 1


class ConfigError(UsageError):
    pass


# ---------------------------------------------------------------------------
# Data errors (exit 2)
# ---------------------------------------------------------------------------

class DataError(SedError):
    exit_code = 2


class EmptyInput(DataError):
    pass


class MissingInput(DataError):
    """An input file is missing or unreadable."""

    def __init__(self, path, what="input", reason=None):
        super().__init__(f"cannot read {what} {path}" + (f": {reason}" if reason else ""))
        self.path = path


class InvalidAudio(DataError):
    pass


class DegenerateFilterbank(DataError):
    pass


class UnknownEvent(DataError):
    def __init__(self, label):
        super().__init__(f"unknown event label: {label!r}")
        self.label = label


class EmptyCorpus(DataError):
    pass


class InvalidAdjacency(DataError):
    pass


class DimensionError(DataError):
    pass


class ShapeError(DataError):
    pass


class CacheMismatch(DataError):
    pass


class MetricInputMismatch(DataError):
    pass


class ParseError(DataError):
    def __init__(self, line_no, message="malformed line"):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class InvalidInterval(DataError):
    def __init__(self, line_no, onset, offset):
        super().__init__(f"line {line_no}: offset {offset} <= onset {onset}")
        self.line_no = line_no


class InvalidSynthConfig(DataError):
    pass


class FormatError(DataError):
    pass


# ---------------------------------------------------------------------------
# Numerical failures (exit 3)
# ---------------------------------------------------------------------------

class NumericalError(SedError):
    exit_code = 3


class DivergenceError(NumericalError):
    """Raised when a gradient or loss goes non-finite.

    `last_good` holds the parameters from before the failing step and
    `history` the epochs completed so far, so the caller can still write a
    checkpoint.
    """

    def __init__(self, message, last_good=None, history=None):
        super().__init__(message)
        self.last_good = last_good
        self.history = history or []


class GradientCheckFailure(NumericalError):
    pass
