"""Exception hierarchy.

Validation errors (bad input, bad config, bad files) map to CLI exit code 1;
everything else under ``GenLoraError`` is a runtime failure (exit code 2).
"""


class GenLoraError(Exception):
    pass


class ValidationError(GenLoraError, ValueError):
    pass


class DimensionError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class DataError(ValidationError):
    pass


class RegistryError(ValidationError):
    pass


class InjectionError(ValidationError):
    pass


class RoutingError(ValidationError):
    pass


class FormatError(ValidationError):
    pass


class CorruptionError(FormatError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class NumericError(GenLoraError, ArithmeticError):
    pass


class StateError(GenLoraError, RuntimeError):
    pass


class CheckError(GenLoraError, RuntimeError):
    pass


class TrainingError(GenLoraError, RuntimeError):
    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step
