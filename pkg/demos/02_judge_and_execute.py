"""Judge one document against a locked bundle and score it deterministically.

Shows the schema-validated reply, verbatim evidence verification, and
the evidence gate capping a high score that lacks verifiable quotes.
"""

from rulers import (
    ChecklistItem,
    EvidenceRules,
    MockJudge,
    MockJudgePolicy,
    PhraseRule,
    RubricBundle,
    Trait,
    build_scoring_prompt,
    execute,
    seal,
    segment,
    validate_output,
)

DOCUMENT = """\
The proposal states its core claim in the first paragraph. Latency
dropped by 40 percent in the pilot. No cost figures are reported.
"""


def main():
    bundle = seal(RubricBundle(
        version="demo-2",
        taxonomy=(
            Trait("t01", "claim", "Is the main claim stated and specific?"),
            Trait("t02", "evidence", "Are claims backed by measurements?"),
        ),
        checklist=(
            ChecklistItem("C01", "t01", "States the core claim explicitly."),
            ChecklistItem("C02", "t01", "Acknowledges missing information."),
            ChecklistItem("C03", "t02", "Reports a quantitative result."),
            ChecklistItem("C04", "t02", "Names the data source or setting."),
        ),
        evidence_rules=EvidenceRules(min_evidence=2, high_score_threshold=5),
        scale_min=1,
        scale_max=6,
    ))

    bank = segment("doc-1", DOCUMENT)
    for unit in bank.units:
        print(f"  {unit.unit_id}: {unit.text}")

    # the judge quotes canned wording for C04 instead of the document,
    # so that citation fails verification and the gate steps in
    policy = MockJudgePolicy(keyword_rules={
        "C01": PhraseRule("states its core claim"),
        "C02": PhraseRule("No cost figures"),
        "C03": PhraseRule("40 percent"),
        "C04": PhraseRule("in the pilot", cite="as measured in production"),
    })
    judge = MockJudge(policy=policy)

    reply = judge.complete(build_scoring_prompt(bundle, bank))
    output = validate_output(reply, bundle)
    print(f"decisions: {output.decisions}")

    for report in execute(output, bundle, bank):
        print(
            f"{report.trait_id}: raw {report.raw_score} -> gated "
            f"{report.gated_score} (valid quotes {report.valid_evidence_count}, "
            f"gate applied: {report.gate_applied})"
        )
        for unit_id, quote, reason in report.invalid_citations:
            print(f"  rejected citation {unit_id} {quote!r}: {reason}")


if __name__ == "__main__":
    main()
