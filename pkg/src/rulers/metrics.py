"""Agreement and stability metrics for ordinal score comparisons.

Quadratic weighted kappa is computed from exact integer confusion
counts, with one float division at the end, so it matches a brute-force
oracle to machine precision. The zero-denominator case (both raters
constant and equal) is undefined in the classic formula; here it
returns 0.0 with a RuntimeWarning.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateError, MismatchedInstanceError


@dataclass(frozen=True)
class LabelPairSet:
    """Aligned (predicted, human) integer labels on a shared ordinal range."""

    predicted: tuple[int, ...]
    human: tuple[int, ...]
    label_min: int
    label_max: int
    instance_ids: tuple[str, ...] | None = None

    def __post_init__(self):
        if len(self.predicted) != len(self.human):
            raise ConfigError(
                f"{len(self.predicted)} predictions vs {len(self.human)} labels"
            )
        if not self.predicted:
            raise ConfigError("label pair set is empty")
        if self.label_min > self.label_max:
            raise ConfigError("label_min must be <= label_max")
        for value in (*self.predicted, *self.human):
            if not (self.label_min <= value <= self.label_max):
                raise ConfigError(
                    f"label {value} outside [{self.label_min}, {self.label_max}]"
                )
        if self.instance_ids is not None and len(self.instance_ids) != len(self.predicted):
            raise ConfigError("instance_ids must align with the pairs")

    def __len__(self):
        return len(self.predicted)


def make_pairs(predicted, human, label_min=None, label_max=None, instance_ids=None):
    """Build a LabelPairSet, inferring the range from the data if omitted."""
    predicted = tuple(int(v) for v in predicted)
    human = tuple(int(v) for v in human)
    values = predicted + human
    if not values:
        raise ConfigError("label pair set is empty")
    if label_min is None:
        label_min = min(values)
    if label_max is None:
        label_max = max(values)
    return LabelPairSet(
        predicted=predicted,
        human=human,
        label_min=int(label_min),
        label_max=int(label_max),
        instance_ids=tuple(instance_ids) if instance_ids is not None else None,
    )


def qwk(pairs: LabelPairSet) -> float:
    """Quadratic weighted kappa: 1 - (weighted observed)/(weighted expected).

    Weights are squared label distances; expected counts come from the
    outer product of the marginals normalized to the pair count. Exact
    integer accumulation keeps the result bit-stable.
    """
    n = len(pairs)
    if n < 2:
        raise DegenerateError(f"qwk needs at least 2 pairs, got {n}")
    size = pairs.label_max - pairs.label_min + 1
    observed = np.zeros((size, size), dtype=np.int64)
    for p, h in zip(pairs.predicted, pairs.human):
        observed[p - pairs.label_min, h - pairs.label_min] += 1
    distance_sq = (np.arange(size)[:, None] - np.arange(size)[None, :]) ** 2
    row = observed.sum(axis=1)
    col = observed.sum(axis=0)
    weighted_observed = int((distance_sq * observed).sum())
    weighted_expected = int((distance_sq * np.outer(row, col)).sum())
    if weighted_expected == 0:
        warnings.warn(
            "qwk denominator is zero (both raters constant and equal); "
            "returning 0.0 by convention",
            RuntimeWarning,
            stacklevel=2,
        )
        return 0.0
    return 1.0 - (n * weighted_observed) / weighted_expected


def distribution_summary(scores, label_set=None) -> dict:
    """Mean, population std, and a histogram over the attainable labels."""
    values = [int(v) for v in scores]
    if not values:
        raise ConfigError("no scores to summarize")
    arr = np.array(values, dtype=float)
    if label_set is None:
        label_set = range(min(values), max(values) + 1)
    labels = sorted(int(v) for v in label_set)
    histogram = {label: 0 for label in labels}
    for value in values:
        if value not in histogram:
            raise ConfigError(f"score {value} outside the label set {labels}")
        histogram[value] += 1
    return {
        "mean": float(arr.mean()),
        "std": float(arr.std()),
        "histogram": histogram,
    }


@dataclass(frozen=True)
class StabilityReport:
    """Agreement per rubric presentation variant plus cross-variant jitter."""

    per_variant_qwk: dict[str, float]
    max_drop: float
    per_instance_variance: float


def stability_report(runs: dict[str, LabelPairSet]) -> StabilityReport:
    """Compare runs of the same instances under different rubric variants.

    Requires every variant to carry instance ids over the same id set;
    per_instance_variance is the population variance of an instance's
    predictions across variants, averaged over instances.
    """
    if len(runs) < 2:
        raise ConfigError(f"stability needs at least 2 variants, got {len(runs)}")
    by_variant = {}
    id_sets = {}
    for variant, pairs in runs.items():
        if pairs.instance_ids is None:
            raise ConfigError(f"variant {variant!r} has no instance ids")
        by_variant[variant] = dict(zip(pairs.instance_ids, pairs.predicted))
        id_sets[variant] = set(pairs.instance_ids)
    reference = None
    for variant, ids in id_sets.items():
        if reference is None:
            reference = ids
        elif ids != reference:
            raise MismatchedInstanceError(
                f"variant {variant!r} covers different instances than the others"
            )
    per_variant = {variant: qwk(pairs) for variant, pairs in runs.items()}
    variants = sorted(runs)
    variances = []
    for instance_id in sorted(reference):
        across = np.array(
            [by_variant[v][instance_id] for v in variants], dtype=float
        )
        variances.append(float(across.var()))
    values = list(per_variant.values())
    return StabilityReport(
        per_variant_qwk=per_variant,
        max_drop=max(values) - min(values),
        per_instance_variance=float(np.mean(variances)),
    )


def stability_to_json(report: StabilityReport) -> dict:
    return {
        "per_variant_qwk": dict(sorted(report.per_variant_qwk.items())),
        "max_drop": report.max_drop,
        "per_instance_variance": report.per_instance_variance,
    }
