"""Exceptions raised by conic_claims.

Every class derives from the builtin a caller would naturally catch, so code
written against ``ValueError``/``RuntimeError`` keeps working.
"""

from typing import Any


class ConicClaimsError(Exception):
    """Base class for all errors raised by this package."""


class ScenarioSchemaError(ConicClaimsError, ValueError):
    """A scenario document field is missing or malformed."""


class ValidationError(ConicClaimsError, ValueError):
    """A market invariant is violated; the message names the invariant."""


class ProbabilityError(ValidationError):
    pass


class TruncationError(ValidationError):
    pass


class DimensionError(ConicClaimsError, ValueError):
    pass


class SizeGuardError(ConicClaimsError, RuntimeError):
    pass


class PolarBudgetError(SizeGuardError):
    """Double description refused; answer the question with LPs instead."""


class ArbitrageError(ConicClaimsError, RuntimeError):
    def __init__(self, message: str, witness: Any = None) -> None:
        super().__init__(message)
        self.witness = witness


class NotAttainableError(ConicClaimsError, ValueError):
    def __init__(self, message: str, functional: Any = None) -> None:
        super().__init__(message)
        self.functional = functional


class NotMaximalError(ConicClaimsError, ValueError):
    def __init__(self, message: str, improvement: Any = None) -> None:
        super().__init__(message)
        self.improvement = improvement


class NeatReductionError(ConicClaimsError, RuntimeError):
    pass


class DecompositionError(ConicClaimsError, ValueError):
    pass


class GConditionError(ConicClaimsError, RuntimeError):
    def __init__(self, message: str, counterexample: Any = None) -> None:
        super().__init__(message)
        self.counterexample = counterexample


class InternalCheckError(ConicClaimsError, AssertionError):
    """A self-check on a computed result failed."""
