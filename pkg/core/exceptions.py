"""Error types shared by every selfdetr app."""

from django.core.exceptions import ValidationError


class SelfDetrError(ValidationError):
    """Base for input/configuration errors; commands exit with code 1."""

    def __str__(self):
        return "; ".join(self.messages)


class ConfigError(SelfDetrError):
    pass


class DimensionError(SelfDetrError):
    pass


class DomainError(SelfDetrError):
    pass


class CapacityError(SelfDetrError):
    pass


class DataFormatError(SelfDetrError):
    pass


class EmptyReportError(SelfDetrError):
    pass


class TrainingDivergedError(ArithmeticError):
    """Non-finite loss or gradient; commands exit with code 2."""

    def __init__(self, message, step=None, components=None):
        super().__init__(message)
        self.step = step
        self.components = dict(components or {})

    def diagnostic(self):
        parts = [str(self.args[0])]
        if self.step is not None:
            parts.append(f"step={self.step}")
        for name, value in self.components.items():
            parts.append(f"{name}={value!r}")
        return " ".join(parts)
