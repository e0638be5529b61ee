"""Measure score stability under rubric presentation changes.

Runs the same dataset twice, once with the standard checklist order and
once reversed. Because replies are validated against the same locked
bundle and scored by deterministic arithmetic, per-instance scores are
bit-identical: presentation cannot move them.
"""

import tempfile

from rulers import RunConfig
from rulers.pipeline import perturb_and_compare
from rulers.synthetic import happy_world, write_world


def main():
    with tempfile.TemporaryDirectory() as tmp:
        paths = write_world(happy_world(n=100, seed=6), f"{tmp}/world")
        config = RunConfig(
            bundle_path=paths["bundle"],
            dataset_path=paths["dataset"],
            output_dir=f"{tmp}/stability",
            policy_path=paths["policy"],
            calibration_size=70,
            seed=0,
        )
        report = perturb_and_compare(config, variants=("standard", "reversed"))
        for variant, value in sorted(report.per_variant_qwk.items()):
            print(f"QWK under {variant} presentation: {value:.4f}")
        print(f"largest QWK drop across variants: {report.max_drop}")
        print(f"mean per-instance score variance: {report.per_instance_variance}")


if __name__ == "__main__":
    main()
