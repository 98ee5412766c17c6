"""Exception hierarchy shared across the package."""


class CplabError(Exception):
    """Base class for all package errors."""


class InvalidInputError(CplabError, ValueError):
    pass


class ResolutionError(CplabError, ValueError):
    """Too few frequency bins inside the heart-rate band."""


class NoPeakError(CplabError, ValueError):
    pass


class UndefinedCorrelationError(CplabError, ValueError):
    pass


class InsufficientDataError(CplabError, ValueError):
    pass


class DegenerateVariabilityError(CplabError, ValueError):
    pass


class InvalidProfileError(CplabError, ValueError):
    pass


class InvalidConfigError(CplabError, ValueError):
    pass


class InvalidLandmarksError(CplabError, ValueError):
    pass


class MarginError(CplabError, ValueError):
    """GT signal does not extend far enough past the video to shift it."""


class FormatError(CplabError, ValueError):
    """Malformed on-disk dataset. ``field`` names the offending entry."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class MissingLabelError(FormatError):
    pass


class ShapeError(CplabError, ValueError):
    pass


class ConsistencyError(CplabError, ValueError):
    """PSD sets and availability flags disagree."""


class NonFiniteLossError(CplabError, RuntimeError):
    def __init__(self, step: int, term: str, value: float):
        super().__init__(f"non-finite loss at step {step}: {term}={value}")
        self.step = step
        self.term = term
        self.value = value
