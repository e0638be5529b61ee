"""Judge client: prompt rendering, backends, retries, and the mock judge.

Prompts embed the locked bundle sections as JSON lines plus the
instance's sentence bank, and demand JSON-only replies. Two backends
speak the same ``complete(request) -> text`` interface:

* ``HttpJudge`` posts a chat-completion request (messages, model,
  temperature) to a configured endpoint. The credential is read from
  the RULERS_API_KEY environment variable at call time and never
  persisted or logged; optional audit logs are redacted.
* ``MockJudge`` computes its reply purely from the request text using a
  keyword policy, so offline runs are bit-reproducible.

Transport retries and schema-repair retries draw from one shared
``RetryBudget`` per instance, so a flaky backend cannot multiply the
total attempt count.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from string import Template

from . import bundle as bundle_mod
from .errors import (
    AuthError,
    BudgetExhausted,
    ConfigError,
    DigestMismatchError,
    SchemaError,
    TemplateError,
    TransportError,
)
from .executor import SentenceBank, JudgeOutput, round_half_away, validate_output

logger = logging.getLogger(__name__)

API_KEY_VAR = "RULERS_API_KEY"

EVIDENCE_STRATEGIES = ("first_m_units", "planted")


@dataclass(frozen=True)
class PromptRequest:
    """One fully rendered request to a judge backend."""

    system_text: str
    user_text: str
    response_must_be_json: bool = True


class RetryBudget:
    """Counter of retries (not first attempts) shared across retry kinds."""

    def __init__(self, total: int):
        if total < 0:
            raise ConfigError("retry budget must be >= 0")
        self.total = total
        self.spent = 0

    @property
    def remaining(self) -> int:
        return self.total - self.spent

    def try_spend(self) -> bool:
        if self.spent < self.total:
            self.spent += 1
            return True
        return False

    def __repr__(self):
        return f"RetryBudget(spent={self.spent}, total={self.total})"


def _jline(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _fill(template: str, **values) -> str:
    try:
        return Template(template).substitute(**values)
    except (KeyError, ValueError) as exc:
        raise TemplateError(f"unresolved prompt placeholder: {exc}") from exc


# ---------------------------------------------------------------------------
# prompt builders
# ---------------------------------------------------------------------------

SCORING_SYSTEM = (
    "You are a strict scoring judge. Follow the locked rubric exactly. "
    "Return JSON only."
)

SCORING_TEMPLATE = """LOCKED BUNDLE HASH: $digest

TRAIT TAXONOMY:
$taxonomy

CHECKLIST:
$checklist

SCORING RULES:
$rules

SENTENCE BANK (ID -> TEXT):
$bank

INSTRUCTIONS:
1. Rate ALL $item_count checklist items exactly once, each in {0, 1, 2} (0=not present, 1=partially, 2=clearly).
2. For every trait, extract EXACTLY $min_evidence quotes. Each quote must be a VERBATIM substring of a single sentence-bank unit and must name that unit's id.
3. Write a short boundary note per trait explaining the closest scoring boundary.
4. Echo the locked bundle hash unchanged.
Return JSON only, shaped as:
{"bundle_digest": "<hash>", "decisions": {"<item_id>": 0 or 1 or 2, "...": 0}, "evidence": {"<trait_id>": [{"unit_id": "<id>", "quote": "<verbatim>"}]}, "boundary_notes": {"<trait_id>": "<note>"}}"""


def build_scoring_prompt(
    bundle: bundle_mod.RubricBundle, bank: SentenceBank, variant: str = "standard"
) -> PromptRequest:
    """Render the per-instance scoring request for one bundle variant.

    Byte-deterministic for fixed inputs; every checklist item id appears
    exactly once (inside its own checklist line).
    """
    sections = bundle_mod.render(bundle, variant)
    if not bank.units:
        raise TemplateError(f"sentence bank for {bank.instance_id!r} is empty")
    bank_text = "\n".join(
        _jline({"id": unit.unit_id, "text": unit.text}) for unit in bank.units
    )
    user = _fill(
        SCORING_TEMPLATE,
        digest=bundle.digest,
        taxonomy=sections.taxonomy_text,
        checklist=sections.checklist_text,
        rules=sections.rules_text,
        bank=bank_text,
        item_count=len(bundle.checklist),
        min_evidence=bundle.evidence_rules.min_evidence,
    )
    return PromptRequest(system_text=SCORING_SYSTEM, user_text=user)


COMPILE_SYSTEM = (
    "You design measurement rubrics as structured JSON. Return JSON only."
)

COMPILE_TEMPLATE = """Compile the rubric below into a JSON object with keys "taxonomy", "checklist", and "evidence_rules".

SHAPE CONSTRAINTS (one JSON line):
$params

Rules:
- "taxonomy": exactly the requested number of traits, each {"id", "name", "description"}.
- "checklist": exactly the requested number of items, each {"id", "trait_id", "statement"}; every trait gets at least one item; statements must be auditable propositions ratable 0=not present, 1=partially, 2=clearly.
- "evidence_rules": {"min_evidence": <as constrained>} plus "high_score_threshold" when constrained.
- Ids are stable keys; this output will be hashed and locked, so it cannot be edited afterwards.

RAW RUBRIC:
$rubric
END RUBRIC

Return JSON only."""


def build_compile_prompt(raw, params) -> PromptRequest:
    """Render the one-time compilation request for a raw rubric."""
    constraint = {
        "traits": params.traits,
        "items": params.items,
        "min_evidence": params.min_evidence,
        "high_score_threshold": params.high_score_threshold,
        "scale_min": raw.scale_min,
        "scale_max": raw.scale_max,
        "trait_names": list(raw.trait_names) if raw.trait_names else None,
    }
    user = _fill(COMPILE_TEMPLATE, params=_jline(constraint), rubric=raw.text)
    return PromptRequest(system_text=COMPILE_SYSTEM, user_text=user)


HOLISTIC_SYSTEM = "You are a scoring judge. Return JSON only."

HOLISTIC_TEMPLATE = """HOLISTIC SCORING MODE
Read the rubric text and the response units, then give ONE overall integer score.

SCALE (one JSON line):
$scale

RUBRIC TEXT:
$rubric
END RUBRIC TEXT

RESPONSE UNITS (ID -> TEXT):
$bank

Return JSON only: {"score": <integer>}"""


def build_holistic_prompt(
    rubric_text: str, bank: SentenceBank, scale_min: int, scale_max: int
) -> PromptRequest:
    """Render the unlocked fallback: raw rubric in, single score out."""
    if not bank.units:
        raise TemplateError(f"sentence bank for {bank.instance_id!r} is empty")
    bank_text = "\n".join(
        _jline({"id": unit.unit_id, "text": unit.text}) for unit in bank.units
    )
    user = _fill(
        HOLISTIC_TEMPLATE,
        scale=_jline({"scale_min": scale_min, "scale_max": scale_max}),
        rubric=rubric_text,
        bank=bank_text,
    )
    return PromptRequest(system_text=HOLISTIC_SYSTEM, user_text=user)


FEEDBACK_TEMPLATE = """$user

YOUR PREVIOUS REPLY:
$previous

VALIDATOR COMPLAINT:
$complaint

Fix every complaint. Return corrected JSON only."""


def with_feedback(request: PromptRequest, previous_reply: str, complaint: str) -> PromptRequest:
    """Append the rejected reply and the validator's complaint for a repair retry."""
    user = _fill(
        FEEDBACK_TEMPLATE,
        user=request.user_text,
        previous=previous_reply,
        complaint=complaint,
    )
    return PromptRequest(
        system_text=request.system_text,
        user_text=user,
        response_must_be_json=request.response_must_be_json,
    )


# ---------------------------------------------------------------------------
# mock judge
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhraseRule:
    """Trigger phrases for one checklist item: full credit, optional partial.

    ``cite`` overrides the quote emitted on a full match. It models a
    judge that writes down canned wording instead of quoting the
    document verbatim, so the citation only survives verification when
    the document happens to contain the canned string exactly.
    """

    full: str
    partial: str | None = None
    cite: str | None = None


@dataclass(frozen=True)
class MockJudgePolicy:
    """Keyword rules driving the deterministic mock judge."""

    keyword_rules: dict[str, PhraseRule]
    evidence_strategy: str = "planted"

    def __post_init__(self):
        if self.evidence_strategy not in EVIDENCE_STRATEGIES:
            raise ConfigError(
                f"unknown evidence strategy {self.evidence_strategy!r}; "
                f"expected one of {EVIDENCE_STRATEGIES}"
            )
        for item_id, rule in self.keyword_rules.items():
            if not rule.full:
                raise ConfigError(f"rule for {item_id} needs a nonempty full phrase")

    def rule_for(self, item_id: str) -> PhraseRule:
        try:
            return self.keyword_rules[item_id]
        except KeyError:
            raise ConfigError(f"mock policy has no rule for item {item_id}") from None


def policy_to_json(policy: MockJudgePolicy) -> dict:
    rules = {}
    for item_id, rule in sorted(policy.keyword_rules.items()):
        if rule.partial is None and rule.cite is None:
            rules[item_id] = rule.full
        else:
            entry = {"full": rule.full}
            if rule.partial is not None:
                entry["partial"] = rule.partial
            if rule.cite is not None:
                entry["cite"] = rule.cite
            rules[item_id] = entry
    return {"keyword_rules": rules, "evidence_strategy": policy.evidence_strategy}


def policy_from_json(doc: dict) -> MockJudgePolicy:
    try:
        rules = {}
        for item_id, value in doc["keyword_rules"].items():
            if isinstance(value, str):
                rules[item_id] = PhraseRule(value)
            else:
                rules[item_id] = PhraseRule(
                    value["full"], value.get("partial"), value.get("cite")
                )
        return MockJudgePolicy(
            keyword_rules=rules,
            evidence_strategy=doc.get("evidence_strategy", "planted"),
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed mock policy: {exc}") from exc


def load_policy(path) -> MockJudgePolicy:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read policy file {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"policy file {path} is not valid JSON: {exc}") from exc
    return policy_from_json(doc)


_HASH_MARK = re.compile(r"LOCKED BUNDLE HASH: ([0-9a-f]{64})")

_TRAIT_KEYS = {"id", "name", "description"}
_ITEM_KEYS = {"id", "trait_id", "statement"}
_UNIT_KEYS = {"id", "text"}
_RULES_KEYS = {"scale_min", "scale_max", "min_evidence", "high_score_threshold"}
_SCALE_KEYS = {"scale_min", "scale_max"}


def _classify_lines(text: str) -> dict:
    """Pick the JSON lines out of a prompt and bucket them by key set."""
    found = {"traits": [], "items": [], "units": [], "rules": None, "scale": None,
             "params": None}
    for line in text.splitlines():
        line = line.strip()
        if not line.startswith("{"):
            continue
        try:
            obj = json.loads(line)
        except ValueError:
            continue
        if not isinstance(obj, dict):
            continue
        keys = set(obj)
        if keys == _TRAIT_KEYS:
            found["traits"].append(obj)
        elif keys == _ITEM_KEYS:
            found["items"].append(obj)
        elif keys == _UNIT_KEYS:
            found["units"].append(obj)
        elif keys == _RULES_KEYS:
            found["rules"] = obj
        elif keys == _SCALE_KEYS:
            found["scale"] = obj
        elif "traits" in keys and "items" in keys and "min_evidence" in keys:
            found["params"] = obj
    return found


@dataclass
class MockJudge:
    """Deterministic offline judge: output is a pure function of the prompt.

    Scoring: each checklist item's rule is looked up in the policy; the
    decision is 2 when the full trigger phrase occurs in some unit, 1
    when only the declared partial phrase occurs, else 0. Matched
    phrases become the evidence quotes (verbatim by construction) and
    are padded to the requested arity per the policy's strategy:
    ``first_m_units`` tops up with distinct unit texts, ``planted``
    cycles the matched phrases so repeats collapse under the gate's
    duplicate rule.
    """

    policy: MockJudgePolicy | None = None
    model_name: str = "mock"
    temperature: float = 0.0
    retry_budget: int = 0
    kind: str = "mock"

    def complete(self, request: PromptRequest) -> str:
        text = request.user_text
        if "LOCKED BUNDLE HASH:" in text:
            return self._score(text)
        if "HOLISTIC SCORING MODE" in text:
            return self._holistic(text)
        if "RAW RUBRIC:" in text:
            return self._compile(text)
        raise ConfigError("mock judge cannot interpret this prompt")

    # -- scoring -----------------------------------------------------------

    def _require_policy(self) -> MockJudgePolicy:
        if self.policy is None:
            raise ConfigError("mock judge needs a policy for this prompt")
        return self.policy

    def _score(self, text: str) -> str:
        policy = self._require_policy()
        digest = _HASH_MARK.search(text)
        if digest is None:
            raise ConfigError("scoring prompt carries no bundle hash")
        found = _classify_lines(text)
        if found["rules"] is None or not found["items"] or not found["units"]:
            raise ConfigError("scoring prompt is missing rendered sections")
        min_evidence = found["rules"]["min_evidence"]
        units = [(u["id"], u["text"]) for u in found["units"]]

        # sorted item order makes the reply invariant across render variants
        items = sorted(found["items"], key=lambda i: i["id"])
        trait_ids = sorted(
            {t["id"] for t in found["traits"]} | {i["trait_id"] for i in items}
        )
        decisions = {}
        matched = {trait_id: [] for trait_id in trait_ids}
        for item in items:
            rule = policy.rule_for(item["id"])
            hit = self._find_phrase(rule.full, units)
            if hit is not None:
                decisions[item["id"]] = 2
                quote = rule.cite if rule.cite is not None else hit[1]
                matched[item["trait_id"]].append((hit[0], quote))
                continue
            if rule.partial is not None:
                hit = self._find_phrase(rule.partial, units)
                if hit is not None:
                    decisions[item["id"]] = 1
                    matched[item["trait_id"]].append(hit)
                    continue
            decisions[item["id"]] = 0

        evidence = {}
        notes = {}
        for trait_id in trait_ids:
            base = []
            seen = set()
            for unit_id, quote in matched[trait_id]:
                if quote not in seen:
                    seen.add(quote)
                    base.append((unit_id, quote))
            entries = self._pad_evidence(base, units, min_evidence, policy.evidence_strategy)
            evidence[trait_id] = [{"unit_id": u, "quote": q} for u, q in entries]
            notes[trait_id] = (
                f"{len(matched[trait_id])} of the trait's trigger phrases were found"
            )
        reply = {
            "bundle_digest": digest.group(1),
            "decisions": decisions,
            "evidence": evidence,
            "boundary_notes": notes,
        }
        return _jline(reply)

    @staticmethod
    def _find_phrase(phrase: str, units) -> tuple[str, str] | None:
        for unit_id, unit_text in units:
            if phrase in unit_text:
                return (unit_id, phrase)
        return None

    @staticmethod
    def _pad_evidence(base, units, arity: int, strategy: str):
        entries = list(base[:arity])
        if strategy == "planted":
            pool = list(base) or [(units[0][0], units[0][1])]
            while len(entries) < arity:
                entries.append(pool[len(entries) % len(pool)])
            return entries
        # first_m_units: top up with distinct unit texts in bank order
        used = {quote for _, quote in entries}
        for unit_id, unit_text in units:
            if len(entries) >= arity:
                break
            if unit_text not in used:
                entries.append((unit_id, unit_text))
                used.add(unit_text)
        while len(entries) < arity:  # tiny bank: cycle what exists
            entries.append(entries[len(entries) % max(len(entries), 1)])
        return entries

    # -- holistic ------------------------------------------------------------

    def _holistic(self, text: str) -> str:
        policy = self._require_policy()
        found = _classify_lines(text)
        if found["scale"] is None or not found["units"]:
            raise ConfigError("holistic prompt is missing scale or units")
        scale_min = found["scale"]["scale_min"]
        scale_max = found["scale"]["scale_max"]
        units = [(u["id"], u["text"]) for u in found["units"]]
        phrases = [policy.keyword_rules[k].full for k in sorted(policy.keyword_rules)]
        present = sum(1 for p in phrases if self._find_phrase(p, units) is not None)
        if phrases:
            score = scale_min + round_half_away(
                present * (scale_max - scale_min), len(phrases)
            )
        else:
            score = scale_min
        return _jline({"score": score})

    # -- compilation -----------------------------------------------------------

    def _compile(self, text: str) -> str:
        found = _classify_lines(text)
        params = found["params"]
        if params is None:
            raise ConfigError("compile prompt carries no shape constraints")
        marker = text.find("RAW RUBRIC:")
        end = text.find("END RUBRIC")
        rubric = text[marker + len("RAW RUBRIC:"): end if end > marker else None]
        tokens = []
        for token in re.findall(r"[a-z]{4,}", rubric.lower()):
            if token not in tokens:
                tokens.append(token)
        if not tokens:
            tokens = ["general"]

        n_traits = params["traits"]
        n_items = params["items"]
        names = params.get("trait_names") or []
        taxonomy = []
        for i in range(1, n_traits + 1):
            trait_id = bundle_mod.trait_id_for(i, n_traits)
            name = names[i - 1] if i <= len(names) else f"trait {i:02d}"
            keyword = tokens[(i - 1) % len(tokens)]
            taxonomy.append(
                {"id": trait_id, "name": name, "description": f"Covers {keyword} aspects."}
            )
        checklist = []
        for i in range(1, n_items + 1):
            trait_id = bundle_mod.trait_id_for((i - 1) % n_traits + 1, n_traits)
            keyword = tokens[(i - 1) % len(tokens)]
            checklist.append(
                {
                    "id": bundle_mod.item_id_for(i, n_items),
                    "trait_id": trait_id,
                    "statement": f'Point {i}: mentions "{keyword}" explicitly.',
                }
            )
        rules = {"min_evidence": params["min_evidence"]}
        if params.get("high_score_threshold") is not None:
            rules["high_score_threshold"] = params["high_score_threshold"]
        return _jline({"taxonomy": taxonomy, "checklist": checklist, "evidence_rules": rules})


# ---------------------------------------------------------------------------
# HTTP judge
# ---------------------------------------------------------------------------

class RetryableTransportError(TransportError):
    """Transient transport failure worth retrying (timeouts, 408/429/5xx)."""


RETRYABLE_STATUS = frozenset({408, 429})


@dataclass
class HttpJudge:
    """Chat-completion client for a hosted judge model.

    The credential comes from the RULERS_API_KEY environment variable at
    request time; it is never stored on this object, in config files, or
    in audit logs.
    """

    endpoint: str
    model_name: str
    temperature: float = 0.0
    retry_budget: int = 3
    timeout: float = 120.0
    backoff_base: float = 0.5
    max_concurrency: int = 4
    audit_dir: str | None = None
    kind: str = "http"

    def __post_init__(self):
        if self.max_concurrency < 1:
            raise ConfigError("max_concurrency must be >= 1")
        self._gate = threading.Semaphore(self.max_concurrency)
        self._audit_lock = threading.Lock()
        self._audit_seq = 0

    def complete(self, request: PromptRequest) -> str:
        import requests

        key = os.environ.get(API_KEY_VAR)
        if not key:
            raise AuthError(f"{API_KEY_VAR} is not set in the environment")
        body = {
            "model": self.model_name,
            "temperature": self.temperature,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": request.user_text},
            ],
        }
        if request.response_must_be_json:
            body["response_format"] = {"type": "json_object"}
        with self._gate:
            try:
                response = requests.post(
                    self.endpoint,
                    json=body,
                    headers={"Authorization": f"Bearer {key}"},
                    timeout=self.timeout,
                )
            except requests.Timeout as exc:
                self._audit(body, None, f"timeout: {exc}", key)
                raise RetryableTransportError(f"request timed out: {exc}") from exc
            except requests.ConnectionError as exc:
                self._audit(body, None, f"connection error: {exc}", key)
                raise RetryableTransportError(f"connection failed: {exc}") from exc
        self._audit(body, response.status_code, response.text, key)
        status = response.status_code
        if status in (401, 403):
            raise AuthError(f"backend rejected the credential (HTTP {status})")
        if status in RETRYABLE_STATUS or status >= 500:
            raise RetryableTransportError(f"backend returned HTTP {status}")
        if status >= 400:
            raise TransportError(f"backend returned HTTP {status}: {response.text[:200]}")
        try:
            data = response.json()
            content = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed completion response: {exc}") from exc
        if not isinstance(content, str):
            raise TransportError("completion content is not text")
        return content

    def _audit(self, body, status, response_text, key):
        """Append one redacted request/response record to the audit log."""
        if self.audit_dir is None:
            return
        def scrub(value):
            text = json.dumps(value, ensure_ascii=False) if not isinstance(value, str) else value
            return text.replace(key, "[REDACTED]")
        try:
            request_doc = json.loads(scrub(body))
        except ValueError:
            request_doc = scrub(body)
        record = {
            "endpoint": self.endpoint,
            "model": self.model_name,
            "status": status,
            "request": request_doc,
            "response": scrub(response_text) if response_text is not None else None,
        }
        with self._audit_lock:
            self._audit_seq += 1
            record["seq"] = self._audit_seq
            os.makedirs(self.audit_dir, exist_ok=True)
            path = os.path.join(self.audit_dir, "http_audit.jsonl")
            with open(path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# invocation and repair
# ---------------------------------------------------------------------------

def invoke(backend, request: PromptRequest, budget: RetryBudget | None = None) -> str:
    """Call a backend, retrying transient transport failures with backoff.

    The budget counts retries; when omitted, a fresh one is sized from
    the backend's retry_budget. Auth failures and non-retryable
    transport errors propagate immediately.
    """
    if budget is None:
        budget = RetryBudget(getattr(backend, "retry_budget", 0))
    attempt = 0
    while True:
        try:
            return backend.complete(request)
        except RetryableTransportError as exc:
            if not budget.try_spend():
                raise BudgetExhausted(f"transport retries exhausted: {exc}") from exc
            delay = getattr(backend, "backoff_base", 0.0) * (2 ** attempt)
            attempt += 1
            if delay > 0:
                logger.debug("transient backend failure, retrying in %.2fs", delay)
                time.sleep(delay)


def score_with_repair(
    backend,
    bundle: bundle_mod.RubricBundle,
    bank: SentenceBank,
    variant: str = "standard",
    budget: RetryBudget | None = None,
) -> JudgeOutput:
    """Obtain a schema-valid JudgeOutput, repairing rejected replies.

    Schema violations (including a wrong echoed digest) are sent back to
    the judge with the validator's complaint appended; each repair round
    spends from the same budget as transport retries.
    """
    if budget is None:
        budget = RetryBudget(getattr(backend, "retry_budget", 0))
    request = build_scoring_prompt(bundle, bank, variant)
    while True:
        raw_text = invoke(backend, request, budget)
        try:
            return validate_output(raw_text, bundle)
        except (SchemaError, DigestMismatchError) as exc:
            if not budget.try_spend():
                raise BudgetExhausted(
                    f"schema repairs exhausted for {bank.instance_id}: {exc}"
                ) from exc
            request = with_feedback(request, raw_text, str(exc))
