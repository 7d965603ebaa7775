"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """An argument violates a documented precondition."""


class ConfigError(ValueError):
    """A configuration object is internally inconsistent."""


class ConfigMismatchError(ValueError):
    """Two objects built from incompatible configurations were combined."""


class DegenerateSourceError(ValueError):
    """A source signal is silent (all-zero) and cannot be power-scaled."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries a diagnostic record."""

    def __init__(self, message: str, record: dict | None = None):
        super().__init__(message)
        self.record = record or {}
