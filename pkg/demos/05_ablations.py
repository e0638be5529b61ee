"""Ablate the pipeline's three safeguards and compare test QWK.

The shifted world plants two failure modes: humans score two points
above the rubric arithmetic, and a third of the documents bluff one
trait with a citation that does not survive verbatim verification.

* no_locking   - holistic single-score prompt instead of the checklist
* no_evidence_gate - quotes are never verified, bluffs score like real work
* no_calibration   - linear rescale instead of the fitted transport
"""

import tempfile

from rulers import RunConfig
from rulers.pipeline import ablate
from rulers.synthetic import shifted_world, write_world


def main():
    with tempfile.TemporaryDirectory() as tmp:
        paths = write_world(shifted_world(n=300, seed=11), f"{tmp}/world")
        config = RunConfig(
            bundle_path=paths["bundle"],
            dataset_path=paths["dataset"],
            output_dir=f"{tmp}/ablation",
            policy_path=paths["policy"],
            calibration_size=200,
            seed=0,
        )
        results = ablate(config)
        width = max(len(name) for name in results)
        for name, entry in sorted(
            results.items(), key=lambda kv: kv[1]["qwk"], reverse=True
        ):
            print(f"{name:<{width}}  QWK {entry['qwk']:.4f}  "
                  f"({entry['n_test']} test instances, {entry['n_failed']} failed)")


if __name__ == "__main__":
    main()
