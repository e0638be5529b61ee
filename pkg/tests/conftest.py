"""Shared fixtures: a small sealed bundle, a sentence bank, and output builders."""

import json

import pytest

from rulers.bundle import ChecklistItem, EvidenceRules, RubricBundle, Trait, seal
from rulers.executor import make_bank


@pytest.fixture
def small_bundle():
    """Two traits, two items each, m=2, threshold 5, scale 1..6."""
    return seal(
        RubricBundle(
            version="test-1",
            taxonomy=(
                Trait("t01", "clarity", "How clearly the text communicates."),
                Trait("t02", "support", "How well claims are grounded."),
            ),
            checklist=(
                ChecklistItem("C01", "t01", "States its point directly."),
                ChecklistItem("C02", "t01", "Avoids contradicting itself."),
                ChecklistItem("C03", "t02", "Backs claims with specifics."),
                ChecklistItem("C04", "t02", "Cites observable facts."),
            ),
            evidence_rules=EvidenceRules(min_evidence=2, high_score_threshold=5),
            scale_min=1,
            scale_max=6,
        )
    )


BANK_TEXTS = (
    "The sky is blue.",
    "Water boils at 100 degrees.",
    "Grass   grows green.",
    "Snow falls in winter.",
)


@pytest.fixture
def bank():
    """Four units s0001..s0004; s0003 has an interior whitespace run."""
    return make_bank("inst01", BANK_TEXTS)


def output_doc(bundle, bank, decisions=None, evidence=None, notes=None):
    """A judge reply document that validates against the fixtures above."""
    if decisions is None:
        decisions = {"C01": 2, "C02": 1, "C03": 0, "C04": 2}
    if evidence is None:
        evidence = {
            "t01": [
                {"unit_id": "s0001", "quote": "sky is blue"},
                {"unit_id": "s0002", "quote": "Water boils"},
            ],
            "t02": [
                {"unit_id": "s0003", "quote": "grows green"},
                {"unit_id": "s0004", "quote": "Snow falls"},
            ],
        }
    doc = {
        "bundle_digest": bundle.digest,
        "decisions": decisions,
        "evidence": evidence,
    }
    if notes is not None:
        doc["boundary_notes"] = notes
    return doc


def output_text(bundle, bank, **kwargs) -> str:
    return json.dumps(output_doc(bundle, bank, **kwargs))
