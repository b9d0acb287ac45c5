class ConfigError(ValueError):
    """Invalid configuration or shape mismatch detected before compute."""


class UsageError(ValueError):
    """An operation was called outside its contract."""


class CalibrationError(RuntimeError):
    """Quantization parameters requested before an observer saw data."""


class BudgetExhausted(RuntimeError):
    """A victim oracle refused a request that would exceed its query budget."""

    def __init__(self, requested, used, budget):
        super().__init__(f"query budget exhausted: {used} used + {requested} requested > {budget}")
        self.requested = requested
        self.used = used
        self.budget = budget


class DatasetFormatError(ValueError):
    """A dataset or checkpoint file could not be parsed."""
