"""Run orchestration: datasets, seeded splits, persistence, ablations.

A run takes a locked bundle and a JSONL dataset through judge, executor,
and calibration, then writes a fixed artifact layout into the output
directory: bundle.json, manifest.json, reports.jsonl, map.json,
scores.jsonl, metrics.json. With the mock backend and a fixed seed,
every artifact except the manifest timestamps is byte-identical across
runs.

Ablation flags degrade the pipeline the same way the harness toggles
do: ``no_locking`` swaps the checklist prompts for a single holistic
score, ``no_evidence_gate`` disables verification and capping, and
``no_calibration`` replaces the fitted map with a linear rescale of the
gated scores onto the human range.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import random
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone

from . import bundle as bundle_mod
from . import calibration as cal_mod
from . import judge as judge_mod
from . import metrics as metrics_mod
from .errors import (
    BudgetExhausted,
    ConfigError,
    DegenerateError,
    TemplateError,
    TransportError,
)
from .executor import (
    InstanceReport,
    SentenceBank,
    Unit,
    build_instance_report,
    failed_report,
    report_from_json,
    report_to_json,
    segment,
)

logger = logging.getLogger(__name__)

ARTIFACTS = ("bundle.json", "manifest.json", "reports.jsonl", "map.json",
             "scores.jsonl", "metrics.json")

ABLATION_SETTINGS = ("full", "no_locking", "no_evidence_gate", "no_calibration")


def _jline(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Instance:
    """One text under evaluation, with an optional gold human score."""

    instance_id: str
    text: str
    units: tuple[tuple[str, str], ...] | None = None
    human_score: int | None = None


def instance_to_json(instance: Instance) -> dict:
    doc = {"instance_id": instance.instance_id, "text": instance.text}
    if instance.units is not None:
        doc["units"] = [{"unit_id": u, "text": t} for u, t in instance.units]
    if instance.human_score is not None:
        doc["human_score"] = instance.human_score
    return doc


def instance_from_json(doc: dict) -> Instance:
    try:
        instance_id = doc["instance_id"]
        text = doc["text"]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"instance record needs instance_id and text: {exc}") from exc
    if not isinstance(instance_id, str) or not instance_id:
        raise ConfigError("instance_id must be a nonempty string")
    if not isinstance(text, str):
        raise ConfigError(f"text of {instance_id} must be a string")
    units = None
    if "units" in doc:
        try:
            units = tuple((u["unit_id"], u["text"]) for u in doc["units"])
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed units for {instance_id}: {exc}") from exc
    score = doc.get("human_score")
    if score is not None:
        if isinstance(score, bool) or not isinstance(score, (int, float)):
            raise ConfigError(f"human_score of {instance_id} must be a number")
        if float(score) != int(score):
            raise ConfigError(f"human_score of {instance_id} must be integral")
        score = int(score)
    return Instance(instance_id=instance_id, text=text, units=units, human_score=score)


def load_dataset(path) -> list[Instance]:
    """Read a JSONL dataset; instance ids must be unique."""
    instances = []
    seen = set()
    try:
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    doc = json.loads(line)
                except ValueError as exc:
                    raise ConfigError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
                instance = instance_from_json(doc)
                if instance.instance_id in seen:
                    raise ConfigError(
                        f"{path}:{line_no}: duplicate instance id {instance.instance_id}"
                    )
                seen.add(instance.instance_id)
                instances.append(instance)
    except OSError as exc:
        raise ConfigError(f"cannot read dataset {path}: {exc}") from exc
    if not instances:
        raise ConfigError(f"dataset {path} is empty")
    return instances


def save_dataset(instances, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for instance in instances:
            fh.write(_jline(instance_to_json(instance)) + "\n")


def bank_for(instance: Instance) -> SentenceBank:
    """Pre-split units when provided, otherwise the deterministic segmenter."""
    if instance.units is not None:
        return SentenceBank(
            instance.instance_id,
            tuple(Unit(unit_id, text) for unit_id, text in instance.units),
        )
    return segment(instance.instance_id, instance.text)


def labels_of(instances) -> dict[str, int]:
    return {
        i.instance_id: i.human_score for i in instances if i.human_score is not None
    }


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """Everything one pipeline run depends on. Flags are independent."""

    bundle_path: str
    dataset_path: str
    output_dir: str
    backend: str = "mock"
    policy_path: str | None = None
    endpoint: str | None = None
    model_name: str | None = None
    temperature: float = 0.0
    retry_budget: int = 3
    audit_dir: str | None = None
    variant: str = "standard"
    verify_mode: str = "exact"
    no_locking: bool = False
    no_evidence_gate: bool = False
    no_calibration: bool = False
    calibration_size: int = 200
    seed: int = 0
    lam: float | str = 1.0
    workers: int = 1


CONFIG_KEYS = tuple(f.name for f in dataclasses.fields(RunConfig))


def load_config_file(path) -> dict:
    """Read a TOML config; keys mirror RunConfig field names."""
    if sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config {path} is not valid TOML: {exc}") from exc
    unknown = set(doc) - set(CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return doc


def make_backend(config: RunConfig):
    """Instantiate the judge backend described by the config."""
    if config.backend == "mock":
        policy = None
        if config.policy_path is not None:
            policy = judge_mod.load_policy(config.policy_path)
        return judge_mod.MockJudge(
            policy=policy,
            temperature=config.temperature,
            retry_budget=config.retry_budget,
        )
    if config.backend == "http":
        if not config.endpoint or not config.model_name:
            raise ConfigError("http backend needs endpoint and model_name")
        return judge_mod.HttpJudge(
            endpoint=config.endpoint,
            model_name=config.model_name,
            temperature=config.temperature,
            retry_budget=config.retry_budget,
            audit_dir=config.audit_dir,
        )
    raise ConfigError(f"unknown backend {config.backend!r}; expected mock or http")


def split_instances(instance_ids, seed: int, calibration_size: int):
    """Seeded calibration/test partition; pure in (seed, sorted ids)."""
    ordered = sorted(instance_ids)
    if calibration_size < 1:
        raise ConfigError("calibration_size must be >= 1")
    if calibration_size > len(ordered):
        raise ConfigError(
            f"calibration_size {calibration_size} exceeds dataset size {len(ordered)}"
        )
    shuffled = list(ordered)
    random.Random(seed).shuffle(shuffled)
    calibration = sorted(shuffled[:calibration_size])
    test = sorted(shuffled[calibration_size:])
    return calibration, test


# ---------------------------------------------------------------------------
# judging a dataset
# ---------------------------------------------------------------------------

def _holistic_rubric_text(bundle) -> str:
    """Flatten the bundle back into prose for the unlocked fallback prompt."""
    lines = []
    for trait in bundle.taxonomy:
        lines.append(f"{trait.name}: {trait.description}")
    for item in bundle.checklist:
        lines.append(f"- {item.statement}")
    return "\n".join(lines)


def _parse_holistic(raw_text: str, scale_min: int, scale_max: int) -> int:
    try:
        doc = json.loads(raw_text)
    except ValueError as exc:
        raise ConfigError(f"holistic reply is not JSON: {exc}") from exc
    if not isinstance(doc, dict) or set(doc) != {"score"}:
        raise ConfigError("holistic reply must be exactly {\"score\": <integer>}")
    score = doc["score"]
    if isinstance(score, bool) or not isinstance(score, int):
        raise ConfigError(f"holistic score must be an integer, got {score!r}")
    if not (scale_min <= score <= scale_max):
        raise ConfigError(f"holistic score {score} outside [{scale_min}, {scale_max}]")
    return score


def _judge_one(instance: Instance, bundle, backend, config: RunConfig) -> InstanceReport:
    budget = judge_mod.RetryBudget(config.retry_budget)
    try:
        bank = bank_for(instance)
        if config.no_locking:
            request = judge_mod.build_holistic_prompt(
                _holistic_rubric_text(bundle), bank, bundle.scale_min, bundle.scale_max
            )
            while True:
                raw_text = judge_mod.invoke(backend, request, budget)
                try:
                    score = _parse_holistic(raw_text, bundle.scale_min, bundle.scale_max)
                    break
                except ConfigError as exc:
                    if not budget.try_spend():
                        raise BudgetExhausted(
                            f"holistic repairs exhausted for {instance.instance_id}: {exc}"
                        ) from exc
                    request = judge_mod.with_feedback(request, raw_text, str(exc))
            return InstanceReport(
                instance_id=instance.instance_id,
                bundle_digest=bundle.digest,
                holistic_score=score,
            )
        output = judge_mod.score_with_repair(
            backend, bundle, bank, config.variant, budget
        )
        return build_instance_report(
            instance.instance_id,
            bundle,
            output,
            bank,
            verify_mode=config.verify_mode,
            gate_enabled=not config.no_evidence_gate,
        )
    except (BudgetExhausted, TransportError, TemplateError) as exc:
        logger.warning("instance %s failed: %s", instance.instance_id, exc)
        return failed_report(instance.instance_id, bundle.digest, str(exc))


def judge_dataset(bundle, instances, backend, config: RunConfig) -> list[InstanceReport]:
    """Judge every instance; failures become FAILED records, never crashes.

    Reports come back sorted by instance id regardless of worker
    scheduling, so persisted artifacts are order-stable.
    """
    # fail fast on an impossible variant instead of 300 failed records
    bundle_mod.render(bundle, config.variant)
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            reports = list(
                pool.map(lambda i: _judge_one(i, bundle, backend, config), instances)
            )
    else:
        reports = [_judge_one(i, bundle, backend, config) for i in instances]
    return sorted(reports, key=lambda r: r.instance_id)


# ---------------------------------------------------------------------------
# score emission
# ---------------------------------------------------------------------------

def _mean_executor_score(report: InstanceReport):
    """Mean gated score as an exact (numerator, denominator) pair."""
    if report.holistic_score is not None:
        return report.holistic_score, 1
    if not report.traits:
        raise ConfigError(f"report {report.instance_id} has no scores")
    return sum(t.gated_score for t in report.traits), len(report.traits)


def linear_scores(reports, bundle, cal_labels) -> dict[str, int]:
    """Uncalibrated fallback: rescale mean gated scores onto the human range."""
    label_values = sorted(set(cal_labels.values()))
    if not label_values:
        raise ConfigError("no calibration labels to define the human range")
    low, high = label_values[0], label_values[-1]
    span_in = bundle.scale_max - bundle.scale_min
    scores = {}
    for report in reports:
        if report.failed:
            scores[report.instance_id] = low
            continue
        numer, denom = _mean_executor_score(report)
        value = low + (numer / denom - bundle.scale_min) * (high - low) / span_in
        scores[report.instance_id] = cal_mod.snap_label(value, label_values)
    return scores


# ---------------------------------------------------------------------------
# the full run
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunResult:
    """In-memory view of one finished run, mirroring the persisted artifacts."""

    run_id: str
    output_dir: str
    bundle_digest: str
    reports: list[InstanceReport]
    scores: dict[str, int]
    calibration_ids: list[str]
    test_ids: list[str]
    cal_map: cal_mod.CalibrationMap | None
    metrics: dict
    manifest: dict


def _config_snapshot(config: RunConfig) -> dict:
    return {k: getattr(config, k) for k in CONFIG_KEYS}


def _run_id(config: RunConfig, digest: str) -> str:
    payload = _jline({"config": _config_snapshot(config), "digest": digest})
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def _write_json(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def run_pipeline(config: RunConfig) -> RunResult:
    """Judge, calibrate, score, and persist one run. See module docstring."""
    started = datetime.now(timezone.utc).isoformat()
    bundle = bundle_mod.load_bundle(config.bundle_path)
    instances = load_dataset(config.dataset_path)
    cal_ids, test_ids = split_instances(
        [i.instance_id for i in instances], config.seed, config.calibration_size
    )
    backend = make_backend(config)
    run_id = _run_id(config, bundle.digest)

    reports = judge_dataset(bundle, instances, backend, config)
    by_id = {r.instance_id: r for r in reports}
    labels = labels_of(instances)
    cal_labels = {i: labels[i] for i in cal_ids if i in labels}
    cal_reports = [by_id[i] for i in cal_ids]

    cal_map = None
    if config.no_calibration:
        scores = linear_scores(reports, bundle, cal_labels)
        label_values = sorted(set(cal_labels.values()))
    else:
        cal_map = cal_mod.fit_calibration(
            cal_reports, cal_labels, bundle.digest, config.lam
        )
        scores = {r.instance_id: cal_mod.apply_map(cal_map, r) for r in reports}
        label_values = list(cal_map.quantile.human_label_set)

    test_pairs = [
        (i, scores[i], labels[i]) for i in test_ids if i in labels
    ]
    run_metrics = {
        "n_instances": len(instances),
        "n_calibration": len(cal_ids),
        "n_test": len(test_ids),
        "n_failed": sum(1 for r in reports if r.failed),
        "qwk": None,
    }
    if len(test_pairs) >= 2:
        predicted = [p for _, p, _ in test_pairs]
        human = [h for _, _, h in test_pairs]
        all_values = predicted + human + label_values
        pairs = metrics_mod.make_pairs(
            predicted, human, min(all_values), max(all_values),
            instance_ids=[i for i, _, _ in test_pairs],
        )
        run_metrics["qwk"] = metrics_mod.qwk(pairs)
        summary = metrics_mod.distribution_summary(predicted, label_values)
        run_metrics["mean"] = summary["mean"]
        run_metrics["std"] = summary["std"]
        run_metrics["histogram"] = {str(k): v for k, v in summary["histogram"].items()}

    os.makedirs(config.output_dir, exist_ok=True)
    bundle_mod.save_bundle(bundle, os.path.join(config.output_dir, "bundle.json"))
    with open(os.path.join(config.output_dir, "reports.jsonl"), "w", encoding="utf-8") as fh:
        for report in reports:
            fh.write(_jline(report_to_json(report)) + "\n")
    if cal_map is not None:
        cal_mod.save_map(cal_map, os.path.join(config.output_dir, "map.json"))
    split_of = {i: "calibration" for i in cal_ids}
    split_of.update({i: "test" for i in test_ids})
    with open(os.path.join(config.output_dir, "scores.jsonl"), "w", encoding="utf-8") as fh:
        for instance_id in sorted(scores):
            fh.write(_jline({
                "instance_id": instance_id,
                "bundle_digest": bundle.digest,
                "run_id": run_id,
                "split": split_of[instance_id],
                "score": scores[instance_id],
                "failed": by_id[instance_id].failed,
            }) + "\n")
    _write_json(os.path.join(config.output_dir, "metrics.json"), run_metrics)
    manifest = {
        "run_id": run_id,
        "bundle_digest": bundle.digest,
        "backend": {
            "kind": config.backend,
            "model_name": config.model_name or "mock",
            "endpoint": config.endpoint,
        },
        "config": _config_snapshot(config),
        "counts": {
            "total": len(instances),
            "failed": run_metrics["n_failed"],
            "calibration": len(cal_ids),
            "test": len(test_ids),
        },
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
    }
    _write_json(os.path.join(config.output_dir, "manifest.json"), manifest)
    return RunResult(
        run_id=run_id,
        output_dir=config.output_dir,
        bundle_digest=bundle.digest,
        reports=reports,
        scores=scores,
        calibration_ids=cal_ids,
        test_ids=test_ids,
        cal_map=cal_map,
        metrics=run_metrics,
        manifest=manifest,
    )


def load_reports(path) -> list[InstanceReport]:
    """Read a reports.jsonl file back into typed records."""
    reports = []
    try:
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    reports.append(report_from_json(json.loads(line)))
                except ValueError as exc:
                    raise ConfigError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read reports {path}: {exc}") from exc
    if not reports:
        raise ConfigError(f"reports file {path} is empty")
    return reports


# ---------------------------------------------------------------------------
# harnesses
# ---------------------------------------------------------------------------

def ablate(config: RunConfig) -> dict:
    """Run the four pipeline settings on the same data, seed, and split.

    The base config's own ablation flags are ignored; each setting sets
    exactly its own flag. Emits ablation.json mapping setting to its
    test metrics.
    """
    results = {}
    for setting in ABLATION_SETTINGS:
        sub = dataclasses.replace(
            config,
            no_locking=setting == "no_locking",
            no_evidence_gate=setting == "no_evidence_gate",
            no_calibration=setting == "no_calibration",
            output_dir=os.path.join(config.output_dir, setting),
        )
        result = run_pipeline(sub)
        results[setting] = {
            "qwk": result.metrics["qwk"],
            "n_test": result.metrics["n_test"],
            "n_failed": result.metrics["n_failed"],
        }
    os.makedirs(config.output_dir, exist_ok=True)
    _write_json(os.path.join(config.output_dir, "ablation.json"), results)
    return results


def perturb_and_compare(config: RunConfig, variants=("standard", "reversed")) -> metrics_mod.StabilityReport:
    """Run each rubric presentation variant with identical seed and split.

    QWK ranges are shared across variants so the per-variant values are
    comparable; the report lands in stability.json.
    """
    if len(variants) < 2:
        raise ConfigError("perturbation needs at least 2 variants")
    bundle = bundle_mod.load_bundle(config.bundle_path)
    for variant in variants:
        bundle_mod.render(bundle, variant)  # MissingParaphraseError before any run
    collected = {}
    for variant in variants:
        sub = dataclasses.replace(
            config,
            variant=variant,
            output_dir=os.path.join(config.output_dir, variant),
        )
        result = run_pipeline(sub)
        labels = labels_of(load_dataset(config.dataset_path))
        triples = [
            (i, result.scores[i], labels[i]) for i in result.test_ids if i in labels
        ]
        if len(triples) < 2:
            raise DegenerateError(
                f"variant {variant} has {len(triples)} labeled test instances; need 2"
            )
        collected[variant] = triples
    all_values = [
        v for triples in collected.values() for _, p, h in triples for v in (p, h)
    ]
    low, high = min(all_values), max(all_values)
    runs = {
        variant: metrics_mod.make_pairs(
            [p for _, p, _ in triples],
            [h for _, _, h in triples],
            low,
            high,
            instance_ids=[i for i, _, _ in triples],
        )
        for variant, triples in collected.items()
    }
    report = metrics_mod.stability_report(runs)
    os.makedirs(config.output_dir, exist_ok=True)
    _write_json(
        os.path.join(config.output_dir, "stability.json"),
        metrics_mod.stability_to_json(report),
    )
    return report
