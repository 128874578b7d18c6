"""
Exceptions raised by the nlbspde modules.

Every error carries a plain message; a few carry the numbers a caller needs
to decide what to do next (nearest eigenvalue, condition number, limit).
"""


class NlbspdeError(Exception):
    """Base class for every error raised by the toolkit."""


class TreeSizeError(NlbspdeError, ValueError):
    """A node or operator budget would be exceeded."""

    def __init__(self, message, limit=None, requested=None):
        super().__init__(message)
        self.limit = limit
        self.requested = requested


class ShapeError(NlbspdeError, ValueError):
    """An array does not have the shape its role requires."""


class RepresentationError(NlbspdeError):
    """Martingale reconstruction failed, the input is not adapted."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ConditionError(NlbspdeError):
    """Coercivity is violated or an implicit step is singular."""

    def __init__(self, message, delta=None, location=None):
        super().__init__(message)
        self.delta = delta
        self.location = location


class CoefficientError(NlbspdeError, ValueError):
    """2b - sum(beta_i^2) is not strictly positive where beta-tilde is formed."""


class DomainError(NlbspdeError, ValueError):
    """An argument lies outside the domain of the operation."""


class FredholmAlternativeError(NlbspdeError):
    """(I - Q) is numerically singular."""

    def __init__(self, message, nearest_eigenvalue=None,
                 condition_number=None):
        super().__init__(message)
        self.nearest_eigenvalue = nearest_eigenvalue
        self.condition_number = condition_number


class MethodError(NlbspdeError):
    """The requested solution method cannot be used for this instance."""


class ConsistencyError(NlbspdeError):
    """Two constructions that must agree do not."""


class ConfigError(NlbspdeError):
    """The experiment configuration cannot be parsed or validated."""

    def __init__(self, message, field=None, line=None):
        where = []
        if line is not None:
            where.append('line {}'.format(line))
        if field is not None:
            where.append('field `{}`'.format(field))
        if where:
            message = '{}: {}'.format(', '.join(where), message)
        super().__init__(message)
        self.field = field
        self.line = line
