"""Exception hierarchy shared by the solver modules and the CLI."""


class OrbsdeError(Exception):
    """Base class for all package errors."""


class ValidationError(OrbsdeError, ValueError):
    """A scenario component violates a standing assumption.

    ``assumption`` names the violated condition so the CLI can report it.
    """

    def __init__(self, message, assumption=None):
        super().__init__(message)
        self.assumption = assumption


class DomainError(OrbsdeError, ValueError):
    """Malformed domain or a query that makes no sense for it."""


class ProjectionError(DomainError):
    """Projection iteration did not converge."""


class NumericalError(OrbsdeError, ArithmeticError):
    """Per-step implicit solve or regression failed."""

    def __init__(self, message, time=None, node=None, residual=None):
        super().__init__(message)
        self.time = time
        self.node = node
        self.residual = residual
