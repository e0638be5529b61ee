"""Deterministic executor: from judge output to gated trait scores.

The judge model only makes micro-decisions: a 0/1/2 rating per checklist
item, plus evidence quotes anchored to sentence-bank units. Everything
that turns those into scores happens here, in exact integer arithmetic:

    mu_k  = sum(d_j) / (2 * J_k)                 coverage of trait k
    raw_k = clamp(1, S, round(1 + (S - 1) * mu_k))

with round() half away from zero, evaluated on fractions so no
binary-float edge case can flip a score. Scales that do not start at 1
are scored on the canonical 1..S grid (S = number of scale points) and
shifted.

The evidence gate then caps the score: when fewer than ``min_evidence``
distinct quotes verify against their cited units, any score at or above
``high_score_threshold`` collapses to ``high_score_threshold - 1``.
Duplicate quotes count once, so repetition cannot satisfy the gate.
"""

from __future__ import annotations

import json
import re
import unicodedata
from dataclasses import dataclass, field

from .bundle import RubricBundle
from .errors import (
    ConfigError,
    DigestMismatchError,
    EmptyTraitError,
    SchemaError,
    UnknownUnitError,
)

VERIFY_MODES = ("exact", "normalized")


# ---------------------------------------------------------------------------
# sentence banks and segmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Unit:
    """One addressable span of the text under evaluation."""

    unit_id: str
    text: str


@dataclass(frozen=True)
class SentenceBank:
    """The atomic units of one instance; the only legal evidence anchors."""

    instance_id: str
    units: tuple[Unit, ...]

    def __post_init__(self):
        index = {}
        for unit in self.units:
            if not unit.text:
                raise ConfigError(f"unit {unit.unit_id!r} has empty text")
            if unit.unit_id in index:
                raise ConfigError(f"duplicate unit id {unit.unit_id!r}")
            index[unit.unit_id] = unit
        object.__setattr__(self, "_index", index)

    def __contains__(self, unit_id: str) -> bool:
        return unit_id in self._index

    def unit(self, unit_id: str) -> Unit:
        try:
            return self._index[unit_id]
        except KeyError:
            raise UnknownUnitError(f"no unit with id {unit_id!r}") from None


def _unit_id(index: int) -> str:
    return f"s{index:04d}"


def make_bank(instance_id: str, texts) -> SentenceBank:
    """Build a bank from pre-split unit texts, assigning s0001, s0002, ..."""
    units = []
    n = 0
    for text in texts:
        if not isinstance(text, str) or not text.strip():
            continue
        n += 1
        units.append(Unit(_unit_id(n), text))
    return SentenceBank(instance_id, tuple(units))


_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+")


def segment(instance_id: str, text: str) -> SentenceBank:
    """Split free text into sentence units with stable sequential ids.

    Boundaries are newlines and sentence-final punctuation followed by
    whitespace; interior periods (decimals, abbreviations glued to the
    next character) do not split. The same text always yields the same
    bank.
    """
    pieces = []
    for line in text.splitlines():
        for piece in _SENTENCE_SPLIT.split(line):
            piece = piece.strip()
            if piece:
                pieces.append(piece)
    return make_bank(instance_id, pieces)


# ---------------------------------------------------------------------------
# evidence verification
# ---------------------------------------------------------------------------

def _match_form(text: str, mode: str) -> str:
    normalized = unicodedata.normalize("NFC", text)
    if mode == "normalized":
        normalized = re.sub(r"\s+", " ", normalized).strip()
    return normalized


def verify_quote(quote: str, bank: SentenceBank, unit_id: str, mode: str = "exact") -> bool:
    """True iff the quote is a contiguous substring of the cited unit.

    Exact mode is case-sensitive substring containment after NFC
    normalization of both sides; normalized mode additionally collapses
    whitespace runs. Empty or whitespace-only quotes never verify. An
    unresolvable unit id is a caller error, not a falsy verdict.
    """
    if mode not in VERIFY_MODES:
        raise ConfigError(f"unknown verify mode {mode!r}; expected one of {VERIFY_MODES}")
    unit = bank.unit(unit_id)
    if not isinstance(quote, str) or not quote.strip():
        return False
    return _match_form(quote, mode) in _match_form(unit.text, mode)


# ---------------------------------------------------------------------------
# judge output schema
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvidenceQuote:
    unit_id: str
    quote: str


@dataclass(frozen=True)
class JudgeOutput:
    """Parsed and schema-checked scoring response."""

    bundle_digest: str
    decisions: dict[str, int]
    evidence: dict[str, tuple[EvidenceQuote, ...]]
    boundary_notes: dict[str, str] = field(default_factory=dict)


def _reject_duplicate_keys(pairs):
    seen = {}
    for key, value in pairs:
        if key in seen:
            raise ValueError(f"duplicate key {key!r}")
        seen[key] = value
    return seen


REQUIRED_OUTPUT_KEYS = ("bundle_digest", "decisions", "evidence")
OPTIONAL_OUTPUT_KEYS = ("boundary_notes",)


def validate_output(raw_text: str, bundle: RubricBundle) -> JudgeOutput:
    """Parse judge text and enforce the schema derived from the bundle.

    Checks, in order: well-formed JSON with no duplicate keys; the
    echoed digest matches the locked bundle (anything else means the
    judge answered for a different rubric); decisions cover exactly the
    bundle's checklist with integer values in {0, 1, 2}; evidence covers
    exactly the bundle's traits with exactly ``min_evidence`` quote
    objects each. Violations are collected into one SchemaError so a
    repair retry can fix everything at once. Unit ids are resolved later
    against the sentence bank; an unknown id is an invalid citation, not
    a schema error.
    """
    try:
        doc = json.loads(raw_text, object_pairs_hook=_reject_duplicate_keys)
    except ValueError as exc:
        raise SchemaError(f"judge output is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError("judge output must be a JSON object")

    allowed = set(REQUIRED_OUTPUT_KEYS) | set(OPTIONAL_OUTPUT_KEYS)
    missing_keys = [k for k in REQUIRED_OUTPUT_KEYS if k not in doc]
    extra_keys = [k for k in doc if k not in allowed]
    if missing_keys or extra_keys:
        raise SchemaError(
            f"judge output keys wrong: missing {missing_keys}, unexpected {extra_keys}"
        )

    digest = doc["bundle_digest"]
    if digest != bundle.digest:
        raise DigestMismatchError(
            f"judge echoed digest {digest!r}, expected {bundle.digest!r}"
        )

    problems = []
    bad_decision_value = []
    bad_arity = []
    malformed_evidence = []

    decisions = doc["decisions"]
    if not isinstance(decisions, dict):
        problems.append("decisions must be an object keyed by checklist item id")
        decisions = {}
    item_ids = set(bundle.item_ids)
    missing_items = sorted(item_ids - set(decisions))
    extra_items = sorted(set(decisions) - item_ids)
    if missing_items:
        problems.append(f"decisions missing items {missing_items}")
    if extra_items:
        problems.append(f"decisions has unknown items {extra_items}")
    clean_decisions = {}
    for item_id in sorted(item_ids & set(decisions)):
        value = decisions[item_id]
        if isinstance(value, bool) or not isinstance(value, int) or value not in (0, 1, 2):
            bad_decision_value.append((item_id, value))
            problems.append(f"decision for {item_id} must be 0, 1, or 2; got {value!r}")
        else:
            clean_decisions[item_id] = value

    expected_m = bundle.evidence_rules.min_evidence
    evidence = doc["evidence"]
    if not isinstance(evidence, dict):
        problems.append("evidence must be an object keyed by trait id")
        evidence = {}
    trait_ids = set(bundle.trait_ids)
    for trait_id in sorted(trait_ids - set(evidence)):
        malformed_evidence.append((trait_id, "missing"))
        problems.append(f"evidence missing for trait {trait_id}")
    for trait_id in sorted(set(evidence) - trait_ids):
        malformed_evidence.append((trait_id, "unknown trait"))
        problems.append(f"evidence given for unknown trait {trait_id}")
    clean_evidence = {}
    for trait_id in sorted(trait_ids & set(evidence)):
        entries = evidence[trait_id]
        if not isinstance(entries, list):
            malformed_evidence.append((trait_id, "not a list"))
            problems.append(f"evidence for {trait_id} must be a list of quote objects")
            continue
        bad_positions = [
            i
            for i, e in enumerate(entries)
            if not isinstance(e, dict)
            or set(e) != {"unit_id", "quote"}
            or not isinstance(e.get("unit_id"), str)
            or not isinstance(e.get("quote"), str)
        ]
        if bad_positions:
            malformed_evidence.append((trait_id, f"bad quote objects at {bad_positions}"))
            problems.append(
                f"evidence for {trait_id} must hold objects with string "
                f"unit_id and quote; bad at {bad_positions}"
            )
            continue
        if len(entries) != expected_m:
            bad_arity.append((trait_id, len(entries)))
            problems.append(
                f"evidence for {trait_id} must list exactly {expected_m} quotes, "
                f"got {len(entries)}"
            )
            continue
        clean_evidence[trait_id] = tuple(
            EvidenceQuote(e["unit_id"], e["quote"]) for e in entries
        )

    notes = doc.get("boundary_notes", {})
    if not isinstance(notes, dict):
        problems.append("boundary_notes must be an object keyed by trait id")
        notes = {}
    clean_notes = {}
    for trait_id, note in notes.items():
        if trait_id not in trait_ids:
            malformed_evidence.append((trait_id, "note for unknown trait"))
            problems.append(f"boundary note for unknown trait {trait_id}")
        elif not isinstance(note, str):
            malformed_evidence.append((trait_id, "non-string note"))
            problems.append(f"boundary note for {trait_id} must be a string")
        else:
            clean_notes[trait_id] = note

    if problems:
        raise SchemaError(
            "; ".join(problems),
            missing_items=missing_items,
            extra_items=extra_items,
            bad_decision_value=bad_decision_value,
            bad_arity=bad_arity,
            malformed_evidence=malformed_evidence,
        )
    return JudgeOutput(
        bundle_digest=digest,
        decisions=clean_decisions,
        evidence=clean_evidence,
        boundary_notes=clean_notes,
    )


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

def round_half_away(numer: int, denom: int) -> int:
    """Round the nonnegative fraction numer/denom half away from zero."""
    if denom <= 0:
        raise ValueError("denominator must be positive")
    if numer < 0:
        raise ValueError("fraction must be nonnegative")
    return (2 * numer + denom) // (2 * denom)


def score_trait(decisions, scale_min: int, scale_max: int) -> tuple[float, int]:
    """Map one trait's item decisions onto the ordinal scale.

    Returns (mu, raw_score) where mu = sum(d) / (2 * J) and raw_score is
    clamp(1, S, round(1 + (S - 1) * mu)) on the canonical 1..S grid
    (S = number of scale points), shifted into [scale_min, scale_max].
    Evaluated as one exact fraction; mu is reported as a float for
    downstream bookkeeping only.
    """
    count = len(decisions)
    if count == 0:
        raise EmptyTraitError("cannot score a trait with no item decisions")
    for value in decisions:
        if isinstance(value, bool) or not isinstance(value, int) or value not in (0, 1, 2):
            raise SchemaError(
                f"decision values must be 0, 1, or 2; got {value!r}",
                bad_decision_value=[("?", value)],
            )
    points = scale_max - scale_min + 1
    numer = sum(decisions)
    denom = 2 * count
    # 1 + (points - 1) * numer/denom as a single fraction
    score = round_half_away(denom + (points - 1) * numer, denom)
    score = min(max(score, 1), points)
    return numer / denom, score + scale_min - 1


def apply_evidence_gate(raw_score: int, valid_count: int, rules) -> tuple[int, bool]:
    """Cap a raw score when the evidence requirement is unmet.

    Returns (gated_score, gate_applied); the gate counts as applied only
    when it actually lowered the score.
    """
    if valid_count < rules.min_evidence and raw_score >= rules.high_score_threshold:
        return rules.high_score_threshold - 1, True
    return raw_score, False


# ---------------------------------------------------------------------------
# execution and per-instance reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TraitScoreReport:
    """Scoring outcome for one trait of one instance."""

    trait_id: str
    mu: float
    raw_score: int
    gated_score: int
    valid_evidence_count: int
    invalid_citations: tuple[tuple[str, str, str], ...]
    gate_applied: bool


@dataclass(frozen=True)
class InstanceReport:
    """Everything downstream stages need about one judged instance."""

    instance_id: str
    bundle_digest: str
    traits: tuple[TraitScoreReport, ...] = ()
    decision_counts: tuple[int, int, int] = (0, 0, 0)
    requested_evidence: int = 0
    boundary_notes: dict[str, str] = field(default_factory=dict)
    holistic_score: int | None = None
    failed: bool = False
    failure_reason: str = ""


def execute(
    output: JudgeOutput,
    bundle: RubricBundle,
    bank: SentenceBank,
    *,
    verify_mode: str = "exact",
    gate_enabled: bool = True,
):
    """Score every trait of one instance; pure in (output, bundle, bank).

    With ``gate_enabled=False`` evidence is neither verified nor gated
    (scores are the raw formula values); the nominal evidence count is
    reported as satisfied so downstream features carry no verification
    signal in that mode.
    """
    if output.bundle_digest != bundle.digest:
        raise DigestMismatchError(
            f"output bound to {output.bundle_digest!r}, bundle is {bundle.digest!r}"
        )
    rules = bundle.evidence_rules
    reports = []
    for trait in bundle.taxonomy:
        items = bundle.items_for_trait(trait.id)
        decisions = [output.decisions[item.id] for item in items]
        mu, raw = score_trait(decisions, bundle.scale_min, bundle.scale_max)
        if gate_enabled:
            verified_forms = set()
            invalid = []
            for entry in output.evidence[trait.id]:
                if entry.unit_id not in bank:
                    invalid.append((entry.unit_id, entry.quote, "unknown_unit"))
                    continue
                if not entry.quote.strip():
                    invalid.append((entry.unit_id, entry.quote, "empty_quote"))
                    continue
                if verify_quote(entry.quote, bank, entry.unit_id, verify_mode):
                    verified_forms.add(_match_form(entry.quote, verify_mode))
                else:
                    invalid.append((entry.unit_id, entry.quote, "mismatch"))
            valid_count = len(verified_forms)
            gated, applied = apply_evidence_gate(raw, valid_count, rules)
        else:
            valid_count = rules.min_evidence
            invalid = []
            gated, applied = raw, False
        reports.append(
            TraitScoreReport(
                trait_id=trait.id,
                mu=mu,
                raw_score=raw,
                gated_score=gated,
                valid_evidence_count=valid_count,
                invalid_citations=tuple(invalid),
                gate_applied=applied,
            )
        )
    return reports


def build_instance_report(
    instance_id: str,
    bundle: RubricBundle,
    output: JudgeOutput,
    bank: SentenceBank,
    *,
    verify_mode: str = "exact",
    gate_enabled: bool = True,
) -> InstanceReport:
    """execute() plus the per-instance bookkeeping downstream fitting needs."""
    traits = execute(
        output, bundle, bank, verify_mode=verify_mode, gate_enabled=gate_enabled
    )
    counts = [0, 0, 0]
    for value in output.decisions.values():
        counts[value] += 1
    return InstanceReport(
        instance_id=instance_id,
        bundle_digest=bundle.digest,
        traits=tuple(traits),
        decision_counts=tuple(counts),
        requested_evidence=bundle.evidence_rules.min_evidence * len(bundle.taxonomy),
        boundary_notes=dict(output.boundary_notes),
        failed=False,
    )


def failed_report(instance_id: str, bundle_digest: str, reason: str) -> InstanceReport:
    """Record for an instance the judge could not score within budget."""
    return InstanceReport(
        instance_id=instance_id,
        bundle_digest=bundle_digest,
        failed=True,
        failure_reason=reason,
    )


def report_to_json(report: InstanceReport) -> dict:
    doc = {
        "instance_id": report.instance_id,
        "bundle_digest": report.bundle_digest,
        "traits": [
            {
                "trait_id": t.trait_id,
                "mu": t.mu,
                "raw_score": t.raw_score,
                "gated_score": t.gated_score,
                "valid_evidence_count": t.valid_evidence_count,
                "invalid_citations": [list(c) for c in t.invalid_citations],
                "gate_applied": t.gate_applied,
            }
            for t in report.traits
        ],
        "decision_counts": list(report.decision_counts),
        "requested_evidence": report.requested_evidence,
        "failed": report.failed,
    }
    if report.boundary_notes:
        doc["boundary_notes"] = dict(sorted(report.boundary_notes.items()))
    if report.holistic_score is not None:
        doc["holistic_score"] = report.holistic_score
    if report.failed:
        doc["failure_reason"] = report.failure_reason
    return doc


def report_from_json(doc: dict) -> InstanceReport:
    try:
        traits = tuple(
            TraitScoreReport(
                trait_id=t["trait_id"],
                mu=t["mu"],
                raw_score=t["raw_score"],
                gated_score=t["gated_score"],
                valid_evidence_count=t["valid_evidence_count"],
                invalid_citations=tuple(tuple(c) for c in t["invalid_citations"]),
                gate_applied=t["gate_applied"],
            )
            for t in doc.get("traits", ())
        )
        return InstanceReport(
            instance_id=doc["instance_id"],
            bundle_digest=doc["bundle_digest"],
            traits=traits,
            decision_counts=tuple(doc.get("decision_counts", (0, 0, 0))),
            requested_evidence=doc.get("requested_evidence", 0),
            boundary_notes=doc.get("boundary_notes", {}),
            holistic_score=doc.get("holistic_score"),
            failed=doc.get("failed", False),
            failure_reason=doc.get("failure_reason", ""),
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed report record: {exc}") from exc
