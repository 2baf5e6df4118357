"""Exception hierarchy shared by all modules."""


class CVDoseError(Exception):
    """Base class for every error raised by cvdose."""


class ValidationError(CVDoseError):
    """Dataset or configuration failed validation."""

    def __init__(self, message, violations=()):
        super().__init__(message)
        self.violations = tuple(violations)


class ParseError(ValidationError):
    """Input file could not be parsed."""


class NumericalError(CVDoseError):
    """Base for fit failures (mapped to exit code 3 by the CLI)."""


class RankDeficient(NumericalError):
    def __init__(self, column, message=None):
        self.column = column
        super().__init__(message or f"design is rank deficient at column {column!r}")


class Separation(NumericalError):
    """Logistic likelihood has no finite maximizer (quasi-complete separation)."""


class SingularBread(NumericalError):
    """Bread matrix of a sandwich estimator is not invertible."""


class DegenerateArm(NumericalError):
    """An arm has too few subjects for the requested estimator."""


class TooManyFailures(NumericalError):
    """Monte Carlo study lost more runs to fit errors than allowed."""
