"""Exception hierarchy shared across the package."""


class CrowdClusterError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(CrowdClusterError):
    """Input data violates a documented contract."""


class ProtocolError(CrowdClusterError):
    """An operation was requested in a state where it is undefined."""


class NumericalError(CrowdClusterError):
    """A numerical routine produced a non-finite intermediate."""


class NotFoundError(CrowdClusterError):
    """A referenced entity does not exist."""


class ConflictError(CrowdClusterError):
    """The request conflicts with the current state (duplicate job, stale lease, ...)."""
