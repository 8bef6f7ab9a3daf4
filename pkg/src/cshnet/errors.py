class ConfigError(ValueError):
    """Inconsistent model, loss or run configuration."""


class InputError(ValueError):
    """Inputs that are structurally incompatible with the requested operation."""


class TrainingError(RuntimeError):
    """Training produced a non-finite loss; ``snapshot`` holds the offending values."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
