"""Exception types shared across the package."""


class ScenarioCtrError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(ScenarioCtrError):
    """Operands have incompatible shapes. The message names both shapes."""


class ContractError(ScenarioCtrError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


class ConfigError(ScenarioCtrError):
    """Invalid configuration: bad variant name, bad dimensions, unknown keys."""


class DataFormatError(ScenarioCtrError):
    """A dataset file or record does not conform to the declared schema."""


class MetricError(ScenarioCtrError):
    """A metric is undefined for the given input (e.g. single-class AUC)."""
