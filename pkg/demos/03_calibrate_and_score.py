"""Fit the ridge + quantile-transport calibrator and score a held-out set.

Uses the shifted synthetic world, where human raters run two points
more lenient than the rubric arithmetic. Raw executor scores therefore
disagree with the labels; the calibrated scores recover them.
"""

import tempfile

from rulers import (
    RunConfig,
    labels_of,
    load_dataset,
    make_pairs,
    qwk,
    run_pipeline,
)
from rulers.synthetic import shifted_world, write_world


def main():
    with tempfile.TemporaryDirectory() as tmp:
        paths = write_world(shifted_world(n=300, seed=11), f"{tmp}/world")
        config = RunConfig(
            bundle_path=paths["bundle"],
            dataset_path=paths["dataset"],
            output_dir=f"{tmp}/run",
            policy_path=paths["policy"],
            calibration_size=200,
            seed=0,
        )
        result = run_pipeline(config)

        labels = labels_of(load_dataset(paths["dataset"]))
        test_ids = [i for i in result.test_ids if i in labels]

        # uncalibrated comparison: mean gated trait score, snapped
        raw_means = {}
        for report in result.reports:
            if report.failed or not report.traits:
                continue
            raw_means[report.instance_id] = round(
                sum(t.gated_score for t in report.traits) / len(report.traits)
            )
        raw_pairs = make_pairs(
            [raw_means[i] for i in test_ids],
            [labels[i] for i in test_ids],
            label_min=1, label_max=6, instance_ids=test_ids,
        )
        calibrated_pairs = make_pairs(
            [result.scores[i] for i in test_ids],
            [labels[i] for i in test_ids],
            label_min=1, label_max=6, instance_ids=test_ids,
        )
        print(f"fitted on {result.cal_map.fitted_on} instances, "
              f"tested on {len(test_ids)}")
        print(f"uncalibrated QWK: {qwk(raw_pairs):.4f}")
        print(f"calibrated QWK:   {qwk(calibrated_pairs):.4f}")
        print(f"artifacts in {result.output_dir}: "
              "bundle.json reports.jsonl map.json scores.jsonl metrics.json")


if __name__ == "__main__":
    main()
