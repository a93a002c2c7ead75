"""Exception types shared across the package."""


class IndexParseError(ValueError):
    """A dataset index or vocabulary file could not be parsed."""


class ValidationError(ValueError):
    """An invariant of a dataset, config, or protocol input is violated."""


class ConfigurationError(ValueError):
    """Mutually inconsistent or out-of-range configuration values."""


class TrainingAborted(RuntimeError):
    """Training stopped because the loss became non-finite."""
