"""Weighted kappa against brute-force oracles, plus stability bookkeeping."""

import random

import numpy as np
import pytest

from rulers.errors import ConfigError, DegenerateError, MismatchedInstanceError
from rulers.metrics import (
    LabelPairSet,
    distribution_summary,
    make_pairs,
    qwk,
    stability_report,
    stability_to_json,
)


def oracle_qwk(predicted, human, label_min, label_max):
    """Literal float translation of the weighted-kappa definition."""
    size = label_max - label_min + 1
    n = len(predicted)
    observed = np.zeros((size, size))
    for p, h in zip(predicted, human):
        observed[p - label_min, h - label_min] += 1
    observed /= n
    row = observed.sum(axis=1)
    col = observed.sum(axis=0)
    expected = np.outer(row, col)
    weights = np.array(
        [[(i - j) ** 2 for j in range(size)] for i in range(size)], dtype=float
    )
    denom = float((weights * expected).sum())
    if denom == 0.0:
        return 0.0
    return 1.0 - float((weights * observed).sum()) / denom


class TestPairSet:
    def test_validation(self):
        with pytest.raises(ConfigError):
            LabelPairSet((1, 2), (1,), 1, 6)
        with pytest.raises(ConfigError):
            LabelPairSet((), (), 1, 6)
        with pytest.raises(ConfigError):
            LabelPairSet((1,), (7,), 1, 6)
        with pytest.raises(ConfigError):
            LabelPairSet((0,), (1,), 1, 6)
        with pytest.raises(ConfigError):
            LabelPairSet((1,), (1,), 6, 1)
        with pytest.raises(ConfigError):
            LabelPairSet((1, 2), (1, 2), 1, 6, instance_ids=("a",))

    def test_make_pairs_infers_range(self):
        pairs = make_pairs([2, 3], [1, 5])
        assert (pairs.label_min, pairs.label_max) == (1, 5)
        pairs = make_pairs([2, 3], [1, 5], label_min=1, label_max=6)
        assert (pairs.label_min, pairs.label_max) == (1, 6)

    def test_len(self):
        assert len(make_pairs([1, 2, 3], [1, 2, 3])) == 3


class TestQwk:
    def test_hand_oracle(self):
        # predictions both 2, humans 1 and 3 on a 1..3 scale:
        # observed weighted sum 2, expected 2*n -> kappa 0
        pairs = make_pairs([2, 2], [1, 3], label_min=1, label_max=3)
        assert qwk(pairs) == 0.0

    def test_perfect_agreement(self):
        pairs = make_pairs([1, 2, 3, 4], [1, 2, 3, 4])
        assert qwk(pairs) == 1.0

    def test_worst_case_is_negative(self):
        pairs = make_pairs([1, 6], [6, 1], label_min=1, label_max=6)
        assert qwk(pairs) < 0

    def test_symmetry(self):
        rng = random.Random(2)
        for _ in range(50):
            n = rng.randint(2, 30)
            p = [rng.randint(1, 6) for _ in range(n)]
            h = [rng.randint(1, 6) for _ in range(n)]
            a = qwk(make_pairs(p, h, label_min=1, label_max=6))
            b = qwk(make_pairs(h, p, label_min=1, label_max=6))
            assert a == pytest.approx(b, abs=1e-12)

    def test_matches_float_oracle(self):
        rng = random.Random(3)
        for _ in range(200):
            label_min, label_max = rng.choice([(1, 6), (1, 7), (3, 15)])
            n = rng.randint(2, 50)
            p = [rng.randint(label_min, label_max) for _ in range(n)]
            h = [rng.randint(label_min, label_max) for _ in range(n)]
            pairs = make_pairs(p, h, label_min=label_min, label_max=label_max)
            if all(x == y for x, y in zip(p, h)) and len(set(p)) == 1:
                continue  # degenerate case tested separately
            expected = oracle_qwk(p, h, label_min, label_max)
            assert qwk(pairs) == pytest.approx(expected, abs=1e-12)

    def test_constant_equal_raters_warn(self):
        pairs = make_pairs([3, 3, 3], [3, 3, 3], label_min=1, label_max=6)
        with pytest.warns(RuntimeWarning):
            assert qwk(pairs) == 0.0

    def test_needs_two_pairs(self):
        with pytest.raises(DegenerateError):
            qwk(make_pairs([1], [1], label_min=1, label_max=6))


class TestDistributionSummary:
    def test_values(self):
        summary = distribution_summary([1, 2, 2, 3], label_set=(1, 2, 3, 4))
        assert summary["mean"] == 2.0
        assert summary["std"] == pytest.approx(np.sqrt(0.5))
        assert summary["histogram"] == {1: 1, 2: 2, 3: 1, 4: 0}

    def test_range_inferred(self):
        summary = distribution_summary([2, 4])
        assert summary["histogram"] == {2: 1, 3: 0, 4: 1}

    def test_score_outside_label_set_rejected(self):
        with pytest.raises(ConfigError):
            distribution_summary([1, 9], label_set=(1, 2, 3))

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            distribution_summary([])


def variant_pairs(predicted, ids=("a", "b", "c", "d")):
    human = (1, 2, 3, 4)
    return make_pairs(
        predicted, human, label_min=1, label_max=6, instance_ids=ids
    )


class TestStability:
    def test_identical_variants_have_zero_variance(self):
        runs = {
            "standard": variant_pairs((1, 2, 3, 4)),
            "reversed": variant_pairs((1, 2, 3, 4)),
        }
        report = stability_report(runs)
        assert report.per_instance_variance == 0.0
        assert report.max_drop == 0.0
        assert report.per_variant_qwk["standard"] == 1.0

    def test_variance_formula(self):
        # one instance differs by 2 across the two variants: var (2/2)^2 = 1
        runs = {
            "standard": variant_pairs((1, 2, 3, 4)),
            "reversed": variant_pairs((3, 2, 3, 4)),
        }
        report = stability_report(runs)
        assert report.per_instance_variance == pytest.approx(1.0 / 4.0)
        assert report.max_drop > 0.0

    def test_alignment_by_id_not_position(self):
        scrambled = make_pairs(
            (4, 3, 2, 1),
            (4, 3, 2, 1),
            label_min=1,
            label_max=6,
            instance_ids=("d", "c", "b", "a"),
        )
        runs = {"standard": variant_pairs((1, 2, 3, 4)), "shuffled": scrambled}
        assert stability_report(runs).per_instance_variance == 0.0

    def test_missing_ids_rejected(self):
        runs = {
            "standard": variant_pairs((1, 2, 3, 4)),
            "reversed": make_pairs((1, 2, 3, 4), (1, 2, 3, 4)),
        }
        with pytest.raises(ConfigError):
            stability_report(runs)

    def test_different_id_sets_rejected(self):
        runs = {
            "standard": variant_pairs((1, 2, 3, 4)),
            "reversed": variant_pairs((1, 2, 3, 4), ids=("a", "b", "c", "e")),
        }
        with pytest.raises(MismatchedInstanceError):
            stability_report(runs)

    def test_needs_two_variants(self):
        with pytest.raises(ConfigError):
            stability_report({"standard": variant_pairs((1, 2, 3, 4))})

    def test_json_shape(self):
        runs = {
            "standard": variant_pairs((1, 2, 3, 4)),
            "reversed": variant_pairs((1, 2, 3, 4)),
        }
        doc = stability_to_json(stability_report(runs))
        assert set(doc) == {"per_variant_qwk", "max_drop", "per_instance_variance"}
        assert list(doc["per_variant_qwk"]) == ["reversed", "standard"]
