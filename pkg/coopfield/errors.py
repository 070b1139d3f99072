"""
Exception and warning classes shared by every coopfield module.

The CLI maps these onto exit statuses (see coopfield.cli.EXIT_CODES).
"""

from __future__ import annotations


class CoopfieldError(Exception):
    """Base class for every error raised by coopfield."""


class ParameterError(CoopfieldError, ValueError):
    """A value violates a documented invariant or range."""


class RiskModeError(ParameterError):
    """The requested risk closure is inconsistent with the game parameters."""


class DomainError(ParameterError):
    """An operation was called outside the domain where it is defined."""


class ChainConfigError(ParameterError):
    """Invalid Monte Carlo chain configuration."""


class ConfigError(ParameterError):
    """Invalid run configuration; names the offending key and value."""

    def __init__(self, key, constraint, value=None):
        self.key = key
        self.constraint = constraint
        self.value = value
        if value is None:
            message = f"{key}: {constraint}"
        else:
            message = f"{key}: {constraint} (got {value!r})"
        super().__init__(message)


class CapacityError(CoopfieldError):
    """The request exceeds a configured capacity (state count, table size)."""


class ConvergenceError(CoopfieldError):
    """An iteration failed to converge; carries the last iterates."""

    def __init__(self, message, iterates=()):
        self.iterates = tuple(iterates)
        super().__init__(f"{message} (last iterates: {', '.join(f'{x:.12g}' for x in self.iterates)})")


class NumericalValidityError(CoopfieldError):
    """A computed quantity left its valid range."""


class UndefinedBoundError(NumericalValidityError):
    """The density bound degenerates because the series correction vanishes."""


class FitError(NumericalValidityError):
    """The decay fit could not be carried out."""


class NotFoundError(CoopfieldError):
    """A search window holds no solution."""


class SeriesTruncationWarning(UserWarning):
    """Series terms were still significant at the truncation index."""


class BoundaryWarning(UserWarning):
    """An extremum sits on the boundary of the evaluated grid."""


class DegenerateTraceWarning(UserWarning):
    """A Monte Carlo trace is constant, so its correlation time is undefined."""
