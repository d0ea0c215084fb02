"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain of the operation (e.g. t outside [0, 1])."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values or failed to converge."""


class ConfigError(ValueError):
    """A configuration is invalid or violates a cross-module constraint."""


class TrainingError(RuntimeError):
    """Training diverged."""
