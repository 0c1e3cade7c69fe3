"""Exception hierarchy shared across the package.

Every error carries a short class-name ``code`` so the CLI can print a
single machine-parsable line and pick an exit status.
"""


class SedError(Exception):
    """Base class for all package errors."""

    exit_code = 1

    @property
    def code(self) -> str:
        return type(self).__name__


class ConfigError(SedError, ValueError):
    exit_code = 2


class InvalidConfig(ConfigError):
    pass


class ConfigMismatch(ConfigError):
    """A checkpoint was built for a different model configuration."""


class MissingInput(SedError, FileNotFoundError):
    exit_code = 3


class NumericError(SedError, FloatingPointError):
    """NaN or Inf produced during computation."""

    exit_code = 4


class UnsupportedFormat(SedError, ValueError):
    pass


class TooShort(SedError, ValueError):
    pass


class EmptyCorpus(SedError, ValueError):
    pass


class ParseError(SedError, ValueError):
    pass


class UnknownLabel(ParseError):
    pass


class ShapeMismatch(SedError, ValueError):
    pass


class NotScalar(SedError, ValueError):
    pass


class NoRunningStats(SedError, RuntimeError):
    pass


class VersionMismatch(SedError, ValueError):
    pass


class CorruptFile(SedError, ValueError):
    pass


class EmptyBatch(SedError, ValueError):
    pass


class EmptyDataset(SedError, ValueError):
    pass


class MissingGradient(SedError, ValueError):
    pass


class TooFewFolds(SedError, ValueError):
    pass


class EvenWindow(SedError, ValueError):
    pass


class NoClasses(SedError, ValueError):
    pass


class EmptyValidation(SedError, ValueError):
    pass


class InvalidDuration(SedError, ValueError):
    pass


class PlacementFailure(SedError, RuntimeError):
    pass
