"""Synthetic worlds: documents with planted trigger phrases and known labels.

Each world bundles three artifacts that agree with each other: a sealed
rubric whose checklist items are keyed to trigger phrases, a mock-judge
policy mapping those items to the same phrases, and a dataset of
documents that contain a controlled subset of the phrases. Because the
mock judge is a pure keyword matcher, the executor's scores on these
documents are computable in advance, which is what makes end-to-end
recovery measurable.

Two generators:

* ``happy_world`` — human labels are exactly the rounded mean of the
  per-trait scores, so a correct pipeline should recover them almost
  perfectly.
* ``shifted_world`` — humans systematically rate 2 points above the
  rubric arithmetic (a leniency bias only the calibrator can remove),
  and one trait can be "bluffed": the judge's canned citation for it
  fails verbatim verification, which only the evidence gate notices.
"""

from __future__ import annotations

import os
import random
from dataclasses import dataclass

from . import bundle as bundle_mod
from .bundle import ChecklistItem, EvidenceRules, RubricBundle, Trait
from .executor import round_half_away, score_trait
from .judge import MockJudgePolicy, PhraseRule, policy_to_json
from .pipeline import Instance, save_dataset, _jline


@dataclass(frozen=True)
class World:
    """A self-consistent bundle + policy + labeled dataset triple."""

    name: str
    bundle: RubricBundle
    policy: MockJudgePolicy
    instances: list[Instance]


def _doc_text(instance_no: int, phrase_sentences) -> str:
    opening = f"Submission {instance_no:04d} follows."
    closing = f"Reviewer sheet {instance_no:04d} ends here."
    return " ".join([opening, *phrase_sentences, closing])


# ---------------------------------------------------------------------------
# happy world: labels equal the rubric arithmetic
# ---------------------------------------------------------------------------

HAPPY_PHRASES = {
    "C01": "anchor-a1", "C02": "anchor-a2", "C03": "anchor-a3", "C04": "anchor-a4",
    "C05": "anchor-b1", "C06": "anchor-b2", "C07": "anchor-b3", "C08": "anchor-b4",
}


def happy_bundle() -> RubricBundle:
    taxonomy = (
        Trait("t01", "coverage", "How much of the expected ground is covered."),
        Trait("t02", "support", "How well claims are backed by specifics."),
    )
    checklist = tuple(
        ChecklistItem(
            item_id,
            "t01" if item_id <= "C04" else "t02",
            f'Contains the marker "{phrase}".',
        )
        for item_id, phrase in sorted(HAPPY_PHRASES.items())
    )
    return bundle_mod.seal(
        RubricBundle(
            version="happy-1",
            taxonomy=taxonomy,
            checklist=checklist,
            evidence_rules=EvidenceRules(min_evidence=2, high_score_threshold=5),
            scale_min=1,
            scale_max=6,
        )
    )


def happy_world(n: int = 300, seed: int = 7) -> World:
    """Documents whose labels are the rounded mean of the two trait scores."""
    bundle = happy_bundle()
    policy = MockJudgePolicy(
        keyword_rules={
            item_id: PhraseRule(phrase) for item_id, phrase in HAPPY_PHRASES.items()
        },
        evidence_strategy="planted",
    )
    rng = random.Random(seed)
    trait_items = {
        "t01": ["C01", "C02", "C03", "C04"],
        "t02": ["C05", "C06", "C07", "C08"],
    }
    instances = []
    for k in range(1, n + 1):
        sentences = []
        raw_scores = []
        for trait_id in ("t01", "t02"):
            items = trait_items[trait_id]
            hits = rng.randint(0, len(items))
            for item_id in rng.sample(items, hits):
                phrase = HAPPY_PHRASES[item_id]
                sentences.append(f"The work clearly shows {phrase} in its argument.")
            decisions = [2] * hits + [0] * (len(items) - hits)
            raw_scores.append(score_trait(decisions, bundle.scale_min, bundle.scale_max)[1])
        label = round_half_away(sum(raw_scores), len(raw_scores))
        instances.append(
            Instance(
                instance_id=f"inst{k:04d}",
                text=_doc_text(k, sentences),
                human_score=label,
            )
        )
    return World("happy", bundle, policy, instances)


# ---------------------------------------------------------------------------
# shifted world: lenient humans plus a bluffable trait
# ---------------------------------------------------------------------------

GRAIN_PHRASES = {
    "C03": "grain-one", "C04": "grain-two", "C05": "grain-three", "C06": "grain-four",
}


def shifted_bundle() -> RubricBundle:
    taxonomy = (
        Trait("t01", "thesis", "Whether the central claim is stated and developed."),
        Trait("t02", "detail", "How many concrete specifics appear."),
    )
    checklist = (
        ChecklistItem("C01", "t01", 'States the core claim "motif-alpha-core".'),
        ChecklistItem("C02", "t01", 'Develops the claim into "motif-beta-core".'),
        *(
            ChecklistItem(item_id, "t02", f'Gives the specific "{phrase}".')
            for item_id, phrase in sorted(GRAIN_PHRASES.items())
        ),
    )
    return bundle_mod.seal(
        RubricBundle(
            version="shifted-1",
            taxonomy=taxonomy,
            checklist=checklist,
            evidence_rules=EvidenceRules(min_evidence=2, high_score_threshold=5),
            scale_min=1,
            scale_max=6,
        )
    )


def shifted_policy() -> MockJudgePolicy:
    """The judge cites canned wording for C02 instead of quoting the text.

    Its citation for C02 is always the string "motif-beta-core." with a
    trailing period. Documents that close a sentence with the phrase
    contain that string verbatim, so the citation verifies; documents
    that merely drop the phrase mid-sentence do not, so the citation is
    rejected and the thesis trait is left with a single distinct valid
    quote. Both kinds of document get identical decisions (2, 2), which
    means nothing except evidence verification can tell them apart.
    That is the planted "bluff" the gate ablation measures.
    """
    rules = {
        "C01": PhraseRule("motif-alpha-core"),
        "C02": PhraseRule("motif-beta-core", cite="motif-beta-core."),
    }
    rules.update(
        {item_id: PhraseRule(phrase) for item_id, phrase in GRAIN_PHRASES.items()}
    )
    return MockJudgePolicy(keyword_rules=rules, evidence_strategy="planted")


SHIFT = 2


def shifted_world(n: int = 300, seed: int = 11, bluff_fraction: float = 0.3) -> World:
    """Lenient-human documents, a share of which bluff the thesis trait.

    Human labels equal clamp(round((h1 + raw2) / 2) + SHIFT, scale) where
    h1 values thesis as 1 (absent), 4 (mentioned in passing), or 6
    (properly developed) — exactly what the gated executor reports,
    because the gate caps bluffed documents at threshold minus one. The
    ungated executor scores bluffed and developed documents identically
    (both trigger decisions (2, 2)), and nothing but the calibrator can
    remove the +2 leniency.
    """
    bundle = shifted_bundle()
    policy = shifted_policy()
    rng = random.Random(seed)
    instances = []
    for k in range(1, n + 1):
        sentences = []
        roll = rng.random()
        if roll < bluff_fraction:
            thesis_kind = "bluff"
        elif roll < 2 * bluff_fraction:
            thesis_kind = "full"
        else:
            thesis_kind = "none"
        if thesis_kind in ("bluff", "full"):
            sentences.append("The essay asserts motif-alpha-core early on.")
        if thesis_kind == "full":
            # sentence-final phrase: the unit contains "motif-beta-core."
            sentences.append("It then builds the claim into motif-beta-core.")
        elif thesis_kind == "bluff":
            # mid-sentence phrase: the canned citation cannot verify
            sentences.append("It gestures at motif-beta-core without development.")
        human_thesis = {"none": 1, "bluff": 4, "full": 6}[thesis_kind]

        detail_items = sorted(GRAIN_PHRASES)
        hits = rng.randint(0, len(detail_items))
        for item_id in rng.sample(detail_items, hits):
            sentences.append(f"A concrete point mentions {GRAIN_PHRASES[item_id]} directly.")
        detail_decisions = [2] * hits + [0] * (len(detail_items) - hits)
        raw_detail = score_trait(detail_decisions, bundle.scale_min, bundle.scale_max)[1]

        label = min(
            bundle.scale_max,
            round_half_away(human_thesis + raw_detail, 2) + SHIFT,
        )
        instances.append(
            Instance(
                instance_id=f"inst{k:04d}",
                text=_doc_text(k, sentences),
                human_score=label,
            )
        )
    return World("shifted", bundle, policy, instances)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def write_world(world: World, directory) -> dict:
    """Materialize bundle.json, dataset.jsonl, and policy.json for CLI use."""
    os.makedirs(directory, exist_ok=True)
    bundle_path = os.path.join(directory, "bundle.json")
    dataset_path = os.path.join(directory, "dataset.jsonl")
    policy_path = os.path.join(directory, "policy.json")
    bundle_mod.save_bundle(world.bundle, bundle_path)
    save_dataset(world.instances, dataset_path)
    with open(policy_path, "w", encoding="utf-8") as fh:
        fh.write(_jline(policy_to_json(world.policy)) + "\n")
    return {"bundle": bundle_path, "dataset": dataset_path, "policy": policy_path}
