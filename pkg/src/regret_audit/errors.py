"""Exception hierarchy.

Two families matter to the CLI: :class:`ValidationError` (bad inputs, exit 2)
and :class:`NumericalError` (a fit or solve broke down, exit 3).
"""


class AuditError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(AuditError, ValueError):
    pass


class NumericalError(AuditError, ArithmeticError):
    pass


# --- log ingestion -----------------------------------------------------------

class MalformedRow(ValidationError):
    pass


class DuplicateKey(ValidationError):
    pass


class NegativeSpend(ValidationError):
    pass


class IncompleteGrid(ValidationError):
    pass


class EpochOutOfRange(ValidationError):
    pass


class InvalidHyper(ValidationError):
    pass


# --- fitting -----------------------------------------------------------------

class DegenerateData(ValidationError):
    pass


class SingularKernel(NumericalError):
    pass


# --- oracle ------------------------------------------------------------------

class ShapeMismatch(ValidationError):
    pass


class InfeasibleSet(ValidationError):
    pass


class ProjectionDiverged(NumericalError):
    pass


class TooLarge(ValidationError):
    pass


class EmptyFeasibleGrid(NumericalError):
    pass


# --- Monte Carlo / reporting ------------------------------------------------

class TooFewDraws(ValidationError):
    pass


class EmptyLevels(ValidationError):
    pass


class MissingCombination(ValidationError):
    pass


class ZeroBaseline(ValidationError):
    pass


# --- command line ----------------------------------------------------------

class ConfigError(ValidationError):
    pass


class WorldMismatch(ValidationError):
    pass
