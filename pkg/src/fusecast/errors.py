"""Exception types shared across the engine.

The CLI maps these onto stable exit codes: ConfigError -> 2,
NumericalError -> 3, IngestionError and OSError -> 4.
"""


class ShapeError(ValueError):
    """Tensor dimensions do not line up for the requested operation."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class IngestionError(ValueError):
    """An input file could not be parsed; message carries the location."""


class StateError(RuntimeError):
    """Optimizer state no longer matches the parameters it was built for."""


class NumericalError(RuntimeError):
    """A non-finite value appeared where the computation requires finite ones."""
