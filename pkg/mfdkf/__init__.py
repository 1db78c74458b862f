from .errors import (
    CalibrationError,
    ConfigError,
    DataAvailabilityError,
    FilterDivergence,
    InputError,
    MfdkfError,
    NumericalError,
    ParameterDomainError,
    TopologyError,
)

__version__ = "0.1.0"
