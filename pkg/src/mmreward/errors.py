class RewardModelError(Exception):
    """Base class for package errors."""


class ConfigError(RewardModelError, ValueError):
    pass


class ParseError(RewardModelError, ValueError):
    def __init__(self, message: str, lineno: "int | None" = None):
        super().__init__(message)
        self.lineno = lineno


class MiningError(RewardModelError, ValueError):
    pass


class ShapeError(RewardModelError, ValueError):
    pass


class SequenceLengthError(RewardModelError, ValueError):
    pass


class RegistryError(RewardModelError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class NumericError(RewardModelError, FloatingPointError):
    pass


class LabelingError(RewardModelError, ValueError):
    pass


class CheckpointError(RewardModelError, ValueError):
    pass
