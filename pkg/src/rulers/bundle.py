"""Rubric bundles: compiled, locked, hashed scoring specifications.

A bundle freezes a natural-language rubric into three parts — a trait
taxonomy, an auditable checklist, and evidence rules — plus the score
scale. Once sealed, the bundle is identified by the SHA-256 digest of
its canonical serialization; every downstream artifact carries that
digest and any tampering is detected by recomputing it.

Canonical form: UTF-8 JSON with keys sorted lexicographically, no
insignificant whitespace, taxonomy and checklist sorted by id, and the
digest field excluded from the hashed payload. Bundle files on disk are
written in this exact form (with the digest added), so a bundle file is
byte-reproducible and any single-byte edit is detectable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

from .errors import (
    CompileSchemaError,
    ConfigError,
    CoverageError,
    BundleIntegrityError,
    MissingParaphraseError,
)

VARIANTS = ("standard", "reversed", "paraphrased")


@dataclass(frozen=True)
class RawRubric:
    """A natural-language rubric plus its ordinal score scale."""

    text: str
    scale_min: int
    scale_max: int
    trait_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ConfigError("rubric text must be nonempty")
        if self.scale_min < 0:
            raise ConfigError("scale_min must be >= 0")
        if self.scale_min >= self.scale_max:
            raise ConfigError("scale_min must be < scale_max")


@dataclass(frozen=True)
class Trait:
    id: str
    name: str
    description: str


@dataclass(frozen=True)
class ChecklistItem:
    id: str
    trait_id: str
    statement: str


@dataclass(frozen=True)
class EvidenceRules:
    """Deterministic grounding requirements.

    min_evidence: verbatim quotes requested per trait.
    high_score_threshold: scores at or above this value are unreachable
    unless min_evidence quotes verify; short of that the score is capped
    at high_score_threshold - 1.
    """

    min_evidence: int
    high_score_threshold: int


@dataclass(frozen=True)
class RubricBundle:
    """A sealed rubric specification. Do not mutate; re-compile instead."""

    version: str
    taxonomy: tuple[Trait, ...]
    checklist: tuple[ChecklistItem, ...]
    evidence_rules: EvidenceRules
    scale_min: int
    scale_max: int
    digest: str = ""
    paraphrase_variants: dict[str, str] | None = None

    @property
    def trait_ids(self) -> tuple[str, ...]:
        return tuple(t.id for t in self.taxonomy)

    @property
    def item_ids(self) -> tuple[str, ...]:
        return tuple(c.id for c in self.checklist)

    def items_for_trait(self, trait_id: str) -> tuple[ChecklistItem, ...]:
        return tuple(c for c in self.checklist if c.trait_id == trait_id)


@dataclass(frozen=True)
class PromptSections:
    """Rendered bundle sections ready for prompt assembly.

    Each section is newline-joined compact JSON lines so the content is
    both machine-checkable and order-auditable.
    """

    taxonomy_text: str
    checklist_text: str
    rules_text: str


def _jline(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


# ---------------------------------------------------------------------------
# canonical serialization and hashing
# ---------------------------------------------------------------------------

def canonical_payload(bundle: RubricBundle) -> dict:
    """The hashed content of a bundle: every field except the digest."""
    payload = {
        "version": bundle.version,
        "taxonomy": [
            {"id": t.id, "name": t.name, "description": t.description}
            for t in sorted(bundle.taxonomy, key=lambda t: t.id)
        ],
        "checklist": [
            {"id": c.id, "trait_id": c.trait_id, "statement": c.statement}
            for c in sorted(bundle.checklist, key=lambda c: c.id)
        ],
        "evidence_rules": {
            "min_evidence": bundle.evidence_rules.min_evidence,
            "high_score_threshold": bundle.evidence_rules.high_score_threshold,
        },
        "scale_min": bundle.scale_min,
        "scale_max": bundle.scale_max,
    }
    if bundle.paraphrase_variants:
        payload["paraphrase_variants"] = dict(sorted(bundle.paraphrase_variants.items()))
    return payload


def canonical_serialize(bundle: RubricBundle) -> bytes:
    """Deterministic bytes of the bundle content, digest excluded."""
    return _jline(canonical_payload(bundle)).encode("utf-8")


def hash_bundle(bundle: RubricBundle) -> str:
    """Lowercase hex SHA-256 of the canonical serialization."""
    return hashlib.sha256(canonical_serialize(bundle)).hexdigest()


# ---------------------------------------------------------------------------
# validation and sealing
# ---------------------------------------------------------------------------

def _validate_fields(bundle: RubricBundle) -> None:
    if not bundle.version:
        raise CompileSchemaError("bundle version must be nonempty")
    if len(bundle.taxonomy) < 1:
        raise CompileSchemaError("taxonomy must declare at least one trait")
    if len(bundle.checklist) < len(bundle.taxonomy):
        raise CompileSchemaError(
            f"checklist has {len(bundle.checklist)} items for "
            f"{len(bundle.taxonomy)} traits; need at least one item per trait"
        )
    trait_ids = [t.id for t in bundle.taxonomy]
    if len(set(trait_ids)) != len(trait_ids):
        raise CompileSchemaError("trait ids must be unique")
    item_ids = [c.id for c in bundle.checklist]
    if len(set(item_ids)) != len(item_ids):
        raise CompileSchemaError("checklist item ids must be unique")
    for t in bundle.taxonomy:
        if not t.id or not t.name:
            raise CompileSchemaError(f"trait {t.id!r} needs a nonempty id and name")
    known = set(trait_ids)
    for c in bundle.checklist:
        if not c.id or not c.statement or not c.statement.strip():
            raise CompileSchemaError(f"item {c.id!r} needs a nonempty id and statement")
        if c.trait_id not in known:
            raise CompileSchemaError(f"item {c.id} references unknown trait {c.trait_id!r}")
    uncovered = known - {c.trait_id for c in bundle.checklist}
    if uncovered:
        raise CoverageError(
            "traits without checklist items: " + ", ".join(sorted(uncovered))
        )
    if bundle.scale_min < 0 or bundle.scale_min >= bundle.scale_max:
        raise CompileSchemaError(
            f"invalid scale [{bundle.scale_min}, {bundle.scale_max}]"
        )
    rules = bundle.evidence_rules
    if rules.min_evidence < 1:
        raise CompileSchemaError("min_evidence must be >= 1")
    if not (2 <= rules.high_score_threshold <= bundle.scale_max):
        raise CompileSchemaError(
            f"high_score_threshold {rules.high_score_threshold} outside "
            f"[2, {bundle.scale_max}]"
        )
    if rules.high_score_threshold - 1 < bundle.scale_min:
        raise CompileSchemaError(
            "high_score_threshold - 1 must stay within the score scale"
        )
    if bundle.paraphrase_variants is not None:
        for key, text in bundle.paraphrase_variants.items():
            if not isinstance(text, str) or not text.strip():
                raise CompileSchemaError(f"paraphrase for {key!r} must be nonempty text")


def seal(bundle: RubricBundle) -> RubricBundle:
    """Validate all invariants, normalize ordering, and stamp the digest.

    The returned bundle is the only form the rest of the pipeline
    accepts; any later edit is caught by digest recomputation.
    """
    _validate_fields(bundle)
    normalized = replace(
        bundle,
        taxonomy=tuple(sorted(bundle.taxonomy, key=lambda t: t.id)),
        checklist=tuple(sorted(bundle.checklist, key=lambda c: c.id)),
        digest="",
    )
    return replace(normalized, digest=hash_bundle(normalized))


def check_sealed(bundle: RubricBundle) -> None:
    """Raise BundleIntegrityError unless the stored digest is current."""
    if not bundle.digest:
        raise BundleIntegrityError("bundle has no digest; seal it first")
    recomputed = hash_bundle(bundle)
    if recomputed != bundle.digest:
        raise BundleIntegrityError(
            f"bundle digest mismatch: stored {bundle.digest}, "
            f"recomputed {recomputed}"
        )


def with_paraphrases(bundle: RubricBundle, mapping: dict[str, str]) -> RubricBundle:
    """Return a new sealed bundle with a paraphrase sidecar attached.

    Changing content changes identity: the result has a fresh digest.
    """
    check_sealed(bundle)
    unknown = set(mapping) - set(bundle.trait_ids) - set(bundle.item_ids)
    if unknown:
        raise ConfigError(
            "paraphrase sidecar names unknown ids: " + ", ".join(sorted(unknown))
        )
    return seal(replace(bundle, paraphrase_variants=dict(mapping), digest=""))


# ---------------------------------------------------------------------------
# file round-trip
# ---------------------------------------------------------------------------

def bundle_to_json(bundle: RubricBundle) -> dict:
    payload = canonical_payload(bundle)
    payload["digest"] = bundle.digest
    return payload


def bundle_from_json(doc: dict) -> RubricBundle:
    """Rebuild a bundle from its file form and verify its digest."""
    try:
        rules = doc["evidence_rules"]
        bundle = RubricBundle(
            version=doc["version"],
            taxonomy=tuple(
                Trait(t["id"], t["name"], t["description"]) for t in doc["taxonomy"]
            ),
            checklist=tuple(
                ChecklistItem(c["id"], c["trait_id"], c["statement"])
                for c in doc["checklist"]
            ),
            evidence_rules=EvidenceRules(
                min_evidence=rules["min_evidence"],
                high_score_threshold=rules["high_score_threshold"],
            ),
            scale_min=doc["scale_min"],
            scale_max=doc["scale_max"],
            digest=doc["digest"],
            paraphrase_variants=doc.get("paraphrase_variants"),
        )
    except (KeyError, TypeError, AttributeError) as exc:
        raise BundleIntegrityError(f"malformed bundle document: {exc}") from exc
    check_sealed(bundle)
    try:
        _validate_fields(bundle)
    except CompileSchemaError as exc:
        # digest verified but content breaks invariants: the file was
        # never produced by a valid seal, so treat it as tampering.
        raise BundleIntegrityError(str(exc)) from exc
    return bundle


def save_bundle(bundle: RubricBundle, path) -> None:
    """Write the bundle file in canonical bytes (digest included)."""
    check_sealed(bundle)
    with open(path, "wb") as fh:
        fh.write(_jline(bundle_to_json(bundle)).encode("utf-8"))


def load_bundle(path) -> RubricBundle:
    """Load and integrity-check a bundle file.

    Any unreadable, unparseable, or tampered file raises
    BundleIntegrityError: a locked artifact that cannot be verified is
    treated the same as one that fails verification.
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
        doc = json.loads(raw.decode("utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read bundle file {path}: {exc}") from exc
    except (ValueError, UnicodeDecodeError) as exc:
        raise BundleIntegrityError(f"bundle file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise BundleIntegrityError(f"bundle file {path} is not a JSON object")
    return bundle_from_json(doc)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def render(bundle: RubricBundle, variant: str = "standard") -> PromptSections:
    """Render trait/checklist/rules sections for one presentation variant.

    standard    — stored (id-sorted) order, original wording
    reversed    — identical lines, sequential order inverted
    paraphrased — stored order, every description/statement swapped for
                  its declared paraphrase

    Rendering never changes ids, min_evidence, the threshold, or the
    scale; only line order and wording vary.
    """
    check_sealed(bundle)
    if variant not in VARIANTS:
        raise ConfigError(f"unknown render variant {variant!r}; expected one of {VARIANTS}")

    paraphrases = bundle.paraphrase_variants or {}
    if variant == "paraphrased":
        needed = set(bundle.trait_ids) | set(bundle.item_ids)
        missing = needed - set(paraphrases)
        if missing:
            raise MissingParaphraseError(missing)

    def trait_line(t: Trait) -> str:
        desc = paraphrases[t.id] if variant == "paraphrased" else t.description
        return _jline({"id": t.id, "name": t.name, "description": desc})

    def item_line(c: ChecklistItem) -> str:
        stmt = paraphrases[c.id] if variant == "paraphrased" else c.statement
        return _jline({"id": c.id, "trait_id": c.trait_id, "statement": stmt})

    trait_lines = [trait_line(t) for t in bundle.taxonomy]
    item_lines = [item_line(c) for c in bundle.checklist]
    if variant == "reversed":
        trait_lines.reverse()
        item_lines.reverse()

    rules_text = _jline(
        {
            "scale_min": bundle.scale_min,
            "scale_max": bundle.scale_max,
            "min_evidence": bundle.evidence_rules.min_evidence,
            "high_score_threshold": bundle.evidence_rules.high_score_threshold,
        }
    )
    return PromptSections(
        taxonomy_text="\n".join(trait_lines),
        checklist_text="\n".join(item_lines),
        rules_text=rules_text,
    )


# ---------------------------------------------------------------------------
# compilation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CompileParams:
    """Shape constraints handed to the compiler judge."""

    traits: int
    items: int
    min_evidence: int
    high_score_threshold: int | None = None
    version: str = "1"
    retry_budget: int = 3


def _id_width(count: int) -> int:
    return max(2, len(str(count)))


def trait_id_for(index: int, total: int) -> str:
    return f"t{index:0{_id_width(total)}d}"


def item_id_for(index: int, total: int) -> str:
    return f"C{index:0{_id_width(total)}d}"


def _draft_to_bundle(draft: dict, raw: RawRubric, params: CompileParams) -> RubricBundle:
    """Turn a compiler-judge draft into a sealed bundle, or raise."""
    if not isinstance(draft, dict):
        raise CompileSchemaError("compiler output is not a JSON object")
    taxonomy = draft.get("taxonomy")
    checklist = draft.get("checklist")
    if not isinstance(taxonomy, list) or not isinstance(checklist, list):
        raise CompileSchemaError("compiler output must carry taxonomy and checklist arrays")
    if len(taxonomy) != params.traits:
        raise CompileSchemaError(
            f"expected exactly {params.traits} traits, got {len(taxonomy)}"
        )
    if len(checklist) != params.items:
        raise CompileSchemaError(
            f"expected exactly {params.items} checklist items, got {len(checklist)}"
        )
    try:
        traits = tuple(
            Trait(str(t["id"]), str(t["name"]), str(t.get("description", "")))
            for t in taxonomy
        )
        items = tuple(
            ChecklistItem(str(c["id"]), str(c["trait_id"]), str(c["statement"]))
            for c in checklist
        )
    except (KeyError, TypeError) as exc:
        raise CompileSchemaError(f"malformed taxonomy/checklist entry: {exc}") from exc

    drafted_rules = draft.get("evidence_rules") or {}
    drafted_m = drafted_rules.get("min_evidence")
    if drafted_m is not None and drafted_m != params.min_evidence:
        raise CompileSchemaError(
            f"compiler set min_evidence={drafted_m}, required {params.min_evidence}"
        )
    # threshold priority: explicit param, then compiler draft, then the
    # default of "only the top two scores demand full evidence".
    tau = params.high_score_threshold
    if tau is None:
        tau = drafted_rules.get("high_score_threshold")
    if tau is None:
        tau = raw.scale_max - 1
    if not isinstance(tau, int) or isinstance(tau, bool):
        raise CompileSchemaError(f"high_score_threshold must be an integer, got {tau!r}")

    return seal(
        RubricBundle(
            version=params.version,
            taxonomy=traits,
            checklist=items,
            evidence_rules=EvidenceRules(params.min_evidence, tau),
            scale_min=raw.scale_min,
            scale_max=raw.scale_max,
        )
    )


def compile_rubric(raw: RawRubric, compiler_judge, params: CompileParams) -> RubricBundle:
    """Compile a raw rubric into a sealed bundle via a judge backend.

    One-time offline step: the judge drafts taxonomy/checklist/rules JSON
    under hard shape constraints; drafts that violate the schema are
    retried with the validator's complaint appended, up to the retry
    budget, then compilation fails hard. The sealed result is immutable;
    any change requires re-compiling and yields a new digest.
    """
    from . import judge as judge_mod  # deferred: judge imports bundle types

    if params.traits < 1:
        raise ConfigError("at least one trait is required (traits >= 1)")
    if params.items < params.traits:
        raise ConfigError("items must be >= traits so every trait can be covered")
    if params.min_evidence < 1:
        raise ConfigError("min_evidence must be >= 1")

    request = judge_mod.build_compile_prompt(raw, params)
    attempts = max(1, params.retry_budget)
    last_error: CompileSchemaError | None = None
    for _ in range(attempts):
        raw_text = judge_mod.invoke(compiler_judge, request)
        try:
            draft = json.loads(raw_text)
        except ValueError as exc:
            last_error = CompileSchemaError(f"compiler output is not JSON: {exc}")
        else:
            try:
                return _draft_to_bundle(draft, raw, params)
            except CompileSchemaError as exc:
                last_error = exc
        request = judge_mod.with_feedback(request, raw_text, str(last_error))
    raise last_error
