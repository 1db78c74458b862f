from typing import List, Optional


class MfdkfError(Exception):
    pass


class ParameterDomainError(MfdkfError, ValueError):
    pass


class InputError(MfdkfError, ValueError):
    pass


class CalibrationError(MfdkfError, RuntimeError):
    pass


class ConfigError(MfdkfError, ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        self.message = message
        super().__init__(f"{key}: {message}")


class TopologyError(MfdkfError, ValueError):
    def __init__(self, violations: List[str]):
        self.violations = list(violations)
        super().__init__("invalid topology: " + "; ".join(self.violations))


class DataAvailabilityError(MfdkfError, ValueError):
    pass


class NumericalError(MfdkfError, ArithmeticError):
    pass


class FilterDivergence(NumericalError):
    def __init__(self, message: str, step: Optional[int] = None, node: Optional[int] = None):
        self.step = step
        self.node = node
        super().__init__(message)
