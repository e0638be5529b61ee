"""Score calibration: ridge latent over report features, then quantile transport.

The executor's trait scores are deterministic but live on the rubric's
scale with the judge's systematic biases baked in. Calibration aligns
them with the human label distribution in two stages:

1. A ridge regressor maps each instance's feature vector (trait scores
   plus grounding diagnostics) to a latent score z. Features are
   standardized internally; the intercept is unpenalized.
2. A one-dimensional empirical quantile map transports z through
   F_model and inverse F_human. On the calibration sample this is the
   sorted pairing, the coupling that minimizes Wasserstein-1, so ranks
   are preserved while the output distribution matches the human one.

Final scores snap to the nearest attainable human label (half away from
zero on ties) so unusual scales like 3..15 round correctly.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateError, DigestMismatchError
from .executor import InstanceReport

LAMBDA_GRID = (0.01, 0.1, 1.0, 10.0)


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureVector:
    """Per-instance calibration features.

    Layout of as_array(): trait scores in trait-id order, then
    invalid_citation_count, valid_evidence_ratio,
    partial_decision_fraction. Holistic reports contribute their single
    score as a one-element trait block with neutral diagnostics.
    """

    trait_scores: tuple[float, ...]
    invalid_citation_count: int
    valid_evidence_ratio: float
    partial_decision_fraction: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [
                *self.trait_scores,
                float(self.invalid_citation_count),
                self.valid_evidence_ratio,
                self.partial_decision_fraction,
            ],
            dtype=float,
        )


def extract_features(report: InstanceReport) -> FeatureVector:
    """Turn one non-failed instance report into its feature vector."""
    if report.failed:
        raise ConfigError(f"cannot featurize failed instance {report.instance_id}")
    if report.holistic_score is not None:
        return FeatureVector(
            trait_scores=(float(report.holistic_score),),
            invalid_citation_count=0,
            valid_evidence_ratio=1.0,
            partial_decision_fraction=0.0,
        )
    if not report.traits:
        raise ConfigError(f"report for {report.instance_id} carries no trait scores")
    traits = sorted(report.traits, key=lambda t: t.trait_id)
    invalid = sum(len(t.invalid_citations) for t in traits)
    total_valid = sum(t.valid_evidence_count for t in traits)
    requested = report.requested_evidence
    ratio = min(total_valid / requested, 1.0) if requested > 0 else 1.0
    n_decisions = sum(report.decision_counts)
    partial = report.decision_counts[1] / n_decisions if n_decisions > 0 else 0.0
    return FeatureVector(
        trait_scores=tuple(float(t.gated_score) for t in traits),
        invalid_citation_count=invalid,
        valid_evidence_ratio=ratio,
        partial_decision_fraction=partial,
    )


def feature_matrix(reports) -> np.ndarray:
    """Stack feature vectors for a batch of reports (all non-failed)."""
    rows = [extract_features(r).as_array() for r in reports]
    if not rows:
        raise DegenerateError("no reports to featurize")
    widths = {len(row) for row in rows}
    if len(widths) != 1:
        raise ConfigError(f"inconsistent feature widths {sorted(widths)}")
    return np.vstack(rows)


# ---------------------------------------------------------------------------
# ridge regression
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RidgeModel:
    """Closed-form ridge fit on standardized features."""

    weights: np.ndarray
    intercept: float
    lam: float
    feature_means: np.ndarray
    feature_stds: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        standardized = (X - self.feature_means) / self.feature_stds
        return standardized @ self.weights + self.intercept


def fit_ridge(X, y, lam: float = 1.0) -> RidgeModel:
    """Solve (Xs'Xs + lam*I) w = Xs'(y - mean(y)) on standardized features.

    Standardization uses population statistics; constant columns keep
    std 1 so they contribute nothing instead of dividing by zero. The
    intercept is the label mean and is not penalized.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2:
        raise ConfigError("X must be a 2-D feature matrix")
    n, p = X.shape
    if n != y.shape[0]:
        raise ConfigError(f"X has {n} rows but y has {y.shape[0]} labels")
    if n < 2:
        raise DegenerateError(f"ridge fit needs at least 2 rows, got {n}")
    if lam < 0:
        raise ConfigError("lambda must be nonnegative")
    means = X.mean(axis=0)
    stds = X.std(axis=0)
    stds = np.where(stds == 0.0, 1.0, stds)
    Xs = (X - means) / stds
    intercept = float(y.mean())
    gram = Xs.T @ Xs + lam * np.eye(p)
    rhs = Xs.T @ (y - intercept)
    try:
        weights = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError:
        # lam = 0 with collinear features: fall back to the minimum-norm fit
        weights = np.linalg.lstsq(gram, rhs, rcond=None)[0]
    return RidgeModel(
        weights=weights,
        intercept=intercept,
        lam=float(lam),
        feature_means=means,
        feature_stds=stds,
    )


def select_lambda(X, y, grid=LAMBDA_GRID) -> float:
    """Pick lambda by leave-one-out squared error over a small grid."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = X.shape[0]
    if n < 3:
        raise DegenerateError("leave-one-out selection needs at least 3 rows")
    best_lam, best_sse = None, None
    for lam in grid:
        sse = 0.0
        for i in range(n):
            keep = np.arange(n) != i
            model = fit_ridge(X[keep], y[keep], lam)
            sse += float((model.predict(X[i])[0] - y[i]) ** 2)
        if best_sse is None or sse < best_sse:
            best_lam, best_sse = lam, sse
    return float(best_lam)


# ---------------------------------------------------------------------------
# quantile transport
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuantileMap:
    """Empirical transport from the latent score law to the human label law.

    Both quantile lists are the raw sorted calibration samples (equal
    length). A single-point model side marks the degenerate constant
    map fitted from an all-identical latent sample.
    """

    model_quantiles: np.ndarray
    human_quantiles: np.ndarray
    human_label_set: tuple[int, ...]

    @property
    def degenerate(self) -> bool:
        return len(self.model_quantiles) == 1


def fit_quantile_map(z_cal, y_cal) -> QuantileMap:
    """Match the empirical law of z to the empirical law of y.

    An all-identical z sample carries no rank information; the map then
    collapses to the constant median of y and a RuntimeWarning is
    emitted instead of failing the run.
    """
    z = np.asarray(z_cal, dtype=float)
    y = np.asarray(y_cal, dtype=float)
    if z.ndim != 1 or y.ndim != 1 or z.shape[0] != y.shape[0]:
        raise ConfigError("z and y must be equal-length vectors")
    if z.shape[0] < 2:
        raise DegenerateError("quantile map needs at least 2 calibration points")
    labels = tuple(sorted({int(v) for v in y}))
    if np.all(z == z[0]):
        warnings.warn(
            "all latent scores identical; quantile map degenerates to the "
            "median human label",
            RuntimeWarning,
            stacklevel=2,
        )
        return QuantileMap(
            model_quantiles=np.array([z[0]]),
            human_quantiles=np.array([float(np.median(y))]),
            human_label_set=labels,
        )
    return QuantileMap(
        model_quantiles=np.sort(z),
        human_quantiles=np.sort(y),
        human_label_set=labels,
    )


def _plotting_positions(n: int) -> np.ndarray:
    return (np.arange(n) + 0.5) / n


def transport(qmap: QuantileMap, z) -> np.ndarray:
    """Apply g = inverse-F_human after F_model, with clamped extrapolation.

    Ties on the model side take their midrank position, so equal latent
    scores always transport to equal values. Evaluating at a calibration
    point reproduces the matching human order statistic exactly.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if qmap.degenerate:
        return np.full(z.shape, qmap.human_quantiles[0])
    n = len(qmap.model_quantiles)
    positions = _plotting_positions(n)
    unique_z, start_index, counts = np.unique(
        qmap.model_quantiles, return_index=True, return_counts=True
    )
    # midrank: a run of duplicates sits at the mean of its positions
    mid_positions = positions[start_index] + (counts - 1) / (2.0 * n)
    model_cdf = np.interp(z, unique_z, mid_positions)
    return np.interp(model_cdf, positions, qmap.human_quantiles)


def snap_label(value: float, label_set) -> int:
    """Round to the nearest attainable label, half away from zero on ties."""
    labels = sorted(int(v) for v in label_set)
    if not labels:
        raise ConfigError("empty label set")
    best = labels[0]
    best_dist = abs(value - best)
    for label in labels[1:]:
        dist = abs(value - label)
        if dist < best_dist:
            best, best_dist = label, dist
        elif dist == best_dist and abs(label) > abs(best):
            best = label
    return best


# ---------------------------------------------------------------------------
# the full map
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CalibrationMap:
    """Fitted ridge + quantile transport, bound to one bundle digest."""

    ridge: RidgeModel
    quantile: QuantileMap
    bundle_digest: str
    fitted_on: int


def fit_calibration(
    reports,
    labels: dict[str, int],
    bundle_digest: str,
    lam: float | str = 1.0,
) -> CalibrationMap:
    """Fit the calibration map from labeled, non-failed instance reports.

    ``lam`` may be a number or "loo" for leave-one-out grid selection.
    Failed instances and instances without labels are excluded; fewer
    than 30 usable points triggers a warning, fewer than 2 an error.
    """
    usable = [r for r in reports if not r.failed and r.instance_id in labels]
    if len(usable) < 2:
        raise DegenerateError(
            f"calibration needs at least 2 labeled instances, got {len(usable)}"
        )
    if len(usable) < 30:
        warnings.warn(
            f"calibration set has only {len(usable)} instances; the fitted "
            "map may be unstable",
            RuntimeWarning,
            stacklevel=2,
        )
    X = feature_matrix(usable)
    y = np.array([labels[r.instance_id] for r in usable], dtype=float)
    if lam == "loo":
        lam = select_lambda(X, y)
    ridge = fit_ridge(X, y, float(lam))
    z = ridge.predict(X)
    quantile = fit_quantile_map(z, y)
    return CalibrationMap(
        ridge=ridge,
        quantile=quantile,
        bundle_digest=bundle_digest,
        fitted_on=len(usable),
    )


def apply_map(cal_map: CalibrationMap, report: InstanceReport) -> int:
    """Calibrated ordinal score for one instance.

    Failed instances receive the minimum attainable label (their failed
    flag travels with them in the score records). Monotone in the
    latent score: higher z never snaps to a lower label.
    """
    if report.bundle_digest != cal_map.bundle_digest:
        raise DigestMismatchError(
            f"report bound to {report.bundle_digest!r}, map fitted for "
            f"{cal_map.bundle_digest!r}"
        )
    if report.failed:
        return min(cal_map.quantile.human_label_set)
    features = extract_features(report).as_array()
    z = float(cal_map.ridge.predict(features)[0])
    g = float(transport(cal_map.quantile, z)[0])
    return snap_label(g, cal_map.quantile.human_label_set)


# ---------------------------------------------------------------------------
# map files
# ---------------------------------------------------------------------------

def map_to_json(cal_map: CalibrationMap) -> dict:
    return {
        "bundle_digest": cal_map.bundle_digest,
        "ridge": {
            "weights": [float(w) for w in cal_map.ridge.weights],
            "intercept": cal_map.ridge.intercept,
            "lambda": cal_map.ridge.lam,
            "feature_means": [float(v) for v in cal_map.ridge.feature_means],
            "feature_stds": [float(v) for v in cal_map.ridge.feature_stds],
        },
        "quantile": {
            "model_quantiles": [float(v) for v in cal_map.quantile.model_quantiles],
            "human_quantiles": [float(v) for v in cal_map.quantile.human_quantiles],
            "human_label_set": list(cal_map.quantile.human_label_set),
        },
        "fitted_on": cal_map.fitted_on,
    }


def map_from_json(doc: dict) -> CalibrationMap:
    try:
        ridge_doc = doc["ridge"]
        quant_doc = doc["quantile"]
        ridge = RidgeModel(
            weights=np.array(ridge_doc["weights"], dtype=float),
            intercept=float(ridge_doc["intercept"]),
            lam=float(ridge_doc["lambda"]),
            feature_means=np.array(ridge_doc["feature_means"], dtype=float),
            feature_stds=np.array(ridge_doc["feature_stds"], dtype=float),
        )
        quantile = QuantileMap(
            model_quantiles=np.array(quant_doc["model_quantiles"], dtype=float),
            human_quantiles=np.array(quant_doc["human_quantiles"], dtype=float),
            human_label_set=tuple(int(v) for v in quant_doc["human_label_set"]),
        )
        return CalibrationMap(
            ridge=ridge,
            quantile=quantile,
            bundle_digest=doc["bundle_digest"],
            fitted_on=int(doc["fitted_on"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed calibration map: {exc}") from exc


def save_map(cal_map: CalibrationMap, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(map_to_json(cal_map), fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_map(path) -> CalibrationMap:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read calibration map {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"calibration map {path} is not valid JSON: {exc}") from exc
    return map_from_json(doc)
