"""Exceptions raised by the laboratory.

Every error derives from ``LaboratoryError`` so the driver can map the whole
family to exit status 1. ``ConfigError`` is the exception mapped to exit 2.
"""


class LaboratoryError(Exception):
    """Base class for pipeline errors."""

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details

    def __getattr__(self, name):
        details = self.__dict__.get("details", {})
        if name in details:
            return details[name]
        raise AttributeError(name)


class ConfigError(LaboratoryError):
    """Malformed or inconsistent run configuration (section/key in details)."""


# profile
class NotNonFourier(LaboratoryError):
    pass


class OutOfRange(LaboratoryError):
    pass


class ConstructionFailed(LaboratoryError):
    pass


# geometry
class NoSolution(LaboratoryError):
    pass


class OutOfDomain(LaboratoryError):
    pass


class NotInS(LaboratoryError):
    pass


class NoWindow(LaboratoryError):
    pass


# parabolic
class NonlinearDivergence(LaboratoryError):
    pass


class Incompatible(LaboratoryError):
    pass


# oscillation
class BudgetInfeasible(LaboratoryError):
    pass


class MeanNotZero(LaboratoryError):
    pass


class BoundaryNotClean(LaboratoryError):
    pass


# scheme
class HypothesisFailed(LaboratoryError):
    pass


class CoverFailed(LaboratoryError):
    pass


class AuditFailed(LaboratoryError):
    pass


class PassIncomplete(LaboratoryError):
    """Raised with ``state`` (best state so far), ``trace`` and ``binding``."""


class NoCrossing(LaboratoryError):
    """Raised with ``state`` holding u* itself, a valid solution on its own."""
