"""Exception hierarchy shared by every module."""


class AuditError(Exception):
    """Base class for domain errors (CLI exit code 1)."""


class ValidationError(AuditError, ValueError):
    """Input violates a documented precondition."""


class PreconditionError(AuditError):
    """A check was asked to run on data that does not satisfy its premises.

    ``failed`` names the premise(s) that did not hold.
    """

    def __init__(self, message, failed=()):
        super().__init__(message)
        self.failed = tuple(failed)


class IdentityError(AuditError):
    """A closed-form identity did not reproduce the measured value."""
