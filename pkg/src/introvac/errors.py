"""Exception types shared across the package."""


class IntroVACError(Exception):
    """Base class for all package errors."""


class InvalidInputError(IntroVACError, ValueError):
    """Input has the wrong shape, range, or contains non-finite values."""


class DegenerateDirectionError(IntroVACError):
    """A classifier row has zero norm and defines no direction."""


class InsufficientDataError(IntroVACError):
    """Too few items to compute the requested quantity."""


class DivergenceError(IntroVACError):
    """A training loss became non-finite."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class NumericalError(IntroVACError):
    """A numerical routine failed beyond its tolerance."""
