"""Exception hierarchy shared by every package under ``function``."""


class XViewError(Exception):
    """Base class for all errors raised by the toolkit."""


class DimensionError(XViewError, ValueError):
    """Operand shapes do not conform."""


class NumericError(XViewError, ArithmeticError):
    """A computation produced a non-finite value."""


class StateError(XViewError, RuntimeError):
    """An object is not in the state an operation requires."""


class ConfigError(XViewError, ValueError):
    """Invalid or unknown configuration."""


class FormatError(XViewError, ValueError):
    """Malformed on-disk or in-memory record."""


class GenerationError(XViewError, RuntimeError):
    """Synthetic scene generation could not satisfy its constraints."""


class ConditionError(XViewError, ValueError):
    """A condition prompt cannot be formed (e.g. empty query mask)."""


class UndefinedMetricError(XViewError, ValueError):
    """A metric is undefined for its operands (empty mask)."""
