"""Exception hierarchy shared across the package."""


class DriftbenchError(Exception):
    """Base class for all errors raised by driftbench."""


class ShapeError(DriftbenchError, ValueError):
    """Operand dimensions do not agree."""


class NumericError(DriftbenchError, ArithmeticError):
    """A computation produced NaN/Inf or diverged."""


class ConfigError(DriftbenchError, ValueError):
    """Invalid configuration value."""


class ContractError(DriftbenchError, RuntimeError):
    """An operation was called outside its precondition."""


class DataError(DriftbenchError, ValueError):
    """Dataset is empty or otherwise unusable."""


class ParseError(DataError):
    """A trial or manifest file could not be parsed."""


class SegmentationError(DataError):
    """Windowing parameters do not fit the trial."""


class SpecError(ConfigError):
    """Invalid domain-shift parameters."""


class TrainingError(DriftbenchError, RuntimeError):
    """Training finished but violated one of its guarantees."""
