"""Exception hierarchy shared by all tfrank modules.

Errors are grouped by the CLI exit code they map to: input/validation
problems (exit 2), unmet metric preconditions (exit 3), and internal
numeric failures (exit 4).
"""

from __future__ import annotations


class TfrankError(Exception):
    """Base class for all tfrank errors."""


# --- input / validation (CLI exit 2) ---------------------------------------

class ValidationError(TfrankError):
    """Malformed or invariant-violating input."""


class MalformedHeader(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class NonFiniteValue(ValidationError):
    pass


class LabelOutOfRange(ValidationError):
    pass


class IoError(ValidationError):
    pass


class InvariantViolation(ValidationError):
    pass


class DuplicateIdentifier(ValidationError):
    pass


class ValueOutOfRange(ValidationError):
    pass


class ParseError(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class IndexOutOfRange(ValidationError):
    pass


class IdMismatch(ValidationError):
    pass


class ConfigError(ValidationError):
    """Unknown key, missing field or bad value in a run config."""


# --- metric preconditions (CLI exit 3) --------------------------------------

class PreconditionError(TfrankError):
    """A metric's stated precondition does not hold for the given input."""


class TooFewSamples(PreconditionError):
    pass


class TooFewCandidates(PreconditionError):
    pass


class EmptyPool(PreconditionError):
    pass


class NoValidTriplet(PreconditionError):
    pass


class ZeroDenominator(PreconditionError):
    pass


class RowNotNormalized(PreconditionError):
    pass


class MissingSourceProbs(PreconditionError):
    pass


class DegenerateInput(PreconditionError):
    pass


class DegenerateRanks(PreconditionError):
    pass


class MissingQValue(PreconditionError):
    pass


# --- numeric failures (CLI exit 4) ------------------------------------------

class NumericError(TfrankError):
    """Computation failed for numerical reasons."""


class NonFinite(NumericError):
    pass


class SvdFailure(NumericError):
    pass


class EmCollapse(NumericError):
    """A mixture component lost essentially all its weight during EM."""


class Divergence(NumericError):
    pass


class StaleCache(NumericError):
    pass


# --- warnings ----------------------------------------------------------------

class DegeneratePoolWarning(UserWarning):
    """All candidates share one raw score; normalization is uninformative."""


class ZeroVarianceWarning(UserWarning):
    """A constant feature row makes its correlations undefined."""


class MissingGradNormsWarning(UserWarning):
    """A candidate has no gradient norms; scored from feature quality only."""
