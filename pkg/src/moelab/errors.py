"""Exception hierarchy shared across the package."""


class MoELabError(Exception):
    """Base class for all package errors."""


class DomainError(MoELabError, ValueError):
    """An argument lies outside the domain of an operation."""


class DegenerateSeriesError(DomainError):
    """A series has zero variance (correlation undefined)."""


class ConfigError(MoELabError, ValueError):
    pass


class ShapeError(MoELabError, ValueError):
    pass


class FormatError(MoELabError, ValueError):
    """A serialized file is malformed. ``field`` names the offending part."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class EmptyRoutingError(MoELabError, RuntimeError):
    pass


class SpecError(MoELabError, ValueError):
    """An intervention spec is internally inconsistent."""


class CapacityError(MoELabError, ValueError):
    pass


class PlantingError(MoELabError, RuntimeError):
    def __init__(self, message: str, worst_margin: float | None = None):
        super().__init__(message)
        self.worst_margin = worst_margin


class VocabularyError(MoELabError, KeyError):
    def __init__(self, word: str):
        super().__init__(word)
        self.word = word

    def __str__(self) -> str:
        return f"unknown word: {self.word!r}"


class TraceError(MoELabError, LookupError):
    pass


class DatasetError(MoELabError, ValueError):
    pass


class NumericError(MoELabError, ArithmeticError):
    pass
