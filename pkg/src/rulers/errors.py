"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration problems exit 2,
bundle integrity failures exit 3, backend failures exit 4.
"""

from __future__ import annotations


class RulersError(Exception):
    """Base class for all package errors."""


class ConfigError(RulersError):
    """Invalid configuration, arguments, or input files."""


# --- bundle / compilation ---------------------------------------------------

class CompileSchemaError(RulersError):
    """Compiler judge output failed the bundle schema after the retry budget."""


class CoverageError(CompileSchemaError):
    """A declared trait ended up with zero checklist items."""


class BundleIntegrityError(RulersError):
    """Stored digest does not match the recomputed canonical digest."""


class MissingParaphraseError(RulersError):
    """Paraphrased rendering requested but the paraphrase map is incomplete."""

    def __init__(self, missing_ids):
        self.missing_ids = sorted(missing_ids)
        super().__init__(
            "paraphrase variants missing for: " + ", ".join(self.missing_ids)
        )


# --- executor ----------------------------------------------------------------

class SchemaError(RulersError):
    """Judge output violates the schema derived from the locked bundle.

    Structured detail is exposed through attributes so callers (and the
    repair-retry loop) can act on specific violations.
    """

    def __init__(
        self,
        message: str,
        *,
        missing_items=(),
        extra_items=(),
        bad_decision_value=(),
        bad_arity=(),
        malformed_evidence=(),
    ):
        super().__init__(message)
        self.missing_items = list(missing_items)
        self.extra_items = list(extra_items)
        self.bad_decision_value = list(bad_decision_value)
        self.bad_arity = list(bad_arity)
        self.malformed_evidence = list(malformed_evidence)


class DigestMismatchError(RulersError):
    """An artifact is bound to a different bundle digest than expected."""


class UnknownUnitError(RulersError):
    """Evidence cites a unit id that does not exist in the sentence bank."""


class EmptyTraitError(RulersError):
    """A trait score was requested with no decisions for that trait."""


# --- judge client -------------------------------------------------------------

class TemplateError(RulersError):
    """A prompt template placeholder could not be resolved."""


class TransportError(RulersError):
    """Non-retryable transport or protocol failure talking to a backend."""


class AuthError(RulersError):
    """Missing or rejected credential for an HTTP backend."""


class BudgetExhausted(RulersError):
    """Retry budget ran out before a usable response was obtained."""


# --- calibration / metrics -----------------------------------------------------

class DegenerateError(RulersError):
    """Too little or too uniform data for the requested fit or statistic."""


class MismatchedInstanceError(RulersError):
    """Stability comparison requested over runs with different instance ids."""
