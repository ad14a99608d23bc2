"""Exception types shared across the library."""


class FixnetError(Exception):
    """Base class for all library errors."""


class ShapeMismatch(FixnetError):
    """Operand shapes are incompatible for the requested operation."""


class UnregisteredPrimitive(FixnetError):
    """A differentiable function used an op with no registered rule."""


class NotScalarOutput(FixnetError):
    """grad() was applied to a function whose output is not a single element."""


class Diverged(FixnetError):
    """A fixed-point iteration blew up instead of settling."""


class MissingGradient(FixnetError):
    """A parameter leaf had no cotangent in the supplied bundle."""


class DataExhausted(FixnetError):
    """The dataset yielded no batch."""


class ConfigError(FixnetError):
    """A run configuration violated one of its invariants.

    The message names the offending field so CLI callers can report it.
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class BadMagic(FixnetError):
    """An IDX file did not start with the expected magic number."""


class TruncatedFile(FixnetError):
    """A dataset file ended before its declared payload."""


class CountMismatch(FixnetError):
    """Image and label files declare different item counts."""


class BadRecordSize(FixnetError):
    """A binary dataset file is not a whole number of records."""


class LabelOutOfRange(FixnetError):
    """A label byte was outside the valid class range."""
