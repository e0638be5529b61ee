"""Command-line interface.

Subcommands mirror the pipeline stages: compile, verify-bundle, judge,
calibrate, score, evaluate, stability, ablate, perturb. Exit codes are
0 on success, 2 for configuration problems (argparse uses 2 as well),
3 for bundle integrity failures, and 4 for backend failures.

Run-shaped subcommands (judge, ablate, perturb) accept --config with a
TOML file whose keys mirror RunConfig fields; explicit flags win over
file values.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import bundle as bundle_mod
from . import calibration as cal_mod
from . import judge as judge_mod
from . import metrics as metrics_mod
from . import pipeline as pipe_mod
from .errors import (
    AuthError,
    BudgetExhausted,
    BundleIntegrityError,
    CompileSchemaError,
    ConfigError,
    DigestMismatchError,
    RulersError,
    SchemaError,
    TransportError,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INTEGRITY = 3
EXIT_BACKEND = 4


def exit_code_for(exc: RulersError) -> int:
    if isinstance(exc, (BundleIntegrityError, DigestMismatchError)):
        return EXIT_INTEGRITY
    if isinstance(exc, (AuthError, BudgetExhausted, TransportError,
                        CompileSchemaError, SchemaError)):
        return EXIT_BACKEND
    return EXIT_CONFIG


def _print_json(doc, out_path=None) -> None:
    text = json.dumps(doc, sort_keys=True, indent=2)
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _parse_range(text: str) -> tuple[int, int]:
    try:
        low, high = text.split(":")
        return int(low), int(high)
    except ValueError as exc:
        raise ConfigError(f"range must look like a:b, got {text!r}") from exc


def _parse_lambda(text: str):
    if text == "loo":
        return "loo"
    try:
        return float(text)
    except ValueError as exc:
        raise ConfigError(f"lambda must be a number or 'loo', got {text!r}") from exc


# ---------------------------------------------------------------------------
# backend and run-config assembly
# ---------------------------------------------------------------------------

def _add_backend_flags(parser) -> None:
    parser.add_argument("--backend", choices=("mock", "http"), default=None,
                        help="judge backend kind (default mock)")
    parser.add_argument("--policy", dest="policy_path", default=None,
                        help="mock policy JSON file")
    parser.add_argument("--endpoint", default=None, help="http backend URL")
    parser.add_argument("--model", dest="model_name", default=None,
                        help="http backend model name")
    parser.add_argument("--temperature", type=float, default=None)
    parser.add_argument("--retry-budget", dest="retry_budget", type=int, default=None)
    parser.add_argument("--audit", dest="audit_dir", default=None,
                        help="directory for redacted HTTP audit logs")


def _add_run_flags(parser) -> None:
    parser.add_argument("--config", default=None, help="TOML config file; flags win")
    parser.add_argument("--bundle", dest="bundle_path", default=None)
    parser.add_argument("--dataset", dest="dataset_path", default=None)
    parser.add_argument("--out-dir", dest="output_dir", default=None)
    _add_backend_flags(parser)
    parser.add_argument("--variant", choices=bundle_mod.VARIANTS, default=None)
    parser.add_argument("--verify-mode", dest="verify_mode",
                        choices=("exact", "normalized"), default=None)
    parser.add_argument("--no-locking", dest="no_locking",
                        action="store_true", default=None)
    parser.add_argument("--no-evidence-gate", dest="no_evidence_gate",
                        action="store_true", default=None)
    parser.add_argument("--no-calibration", dest="no_calibration",
                        action="store_true", default=None)
    parser.add_argument("--calibration-size", dest="calibration_size",
                        type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--lambda", dest="lam", type=_parse_lambda, default=None)
    parser.add_argument("--workers", type=int, default=None)


def build_run_config(args) -> pipe_mod.RunConfig:
    merged = {}
    if getattr(args, "config", None):
        merged.update(pipe_mod.load_config_file(args.config))
    for key in pipe_mod.CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    missing = [k for k in ("bundle_path", "dataset_path", "output_dir")
               if not merged.get(k)]
    if missing:
        raise ConfigError("missing required settings: " + ", ".join(missing))
    try:
        return pipe_mod.RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(f"bad run configuration: {exc}") from exc


def _standalone_backend(args):
    kind = getattr(args, "backend", None) or "mock"
    if kind == "mock":
        policy = None
        if getattr(args, "policy_path", None):
            policy = judge_mod.load_policy(args.policy_path)
        return judge_mod.MockJudge(
            policy=policy,
            retry_budget=args.retry_budget if args.retry_budget is not None else 3,
        )
    if not args.endpoint or not args.model_name:
        raise ConfigError("http backend needs --endpoint and --model")
    return judge_mod.HttpJudge(
        endpoint=args.endpoint,
        model_name=args.model_name,
        temperature=args.temperature if args.temperature is not None else 0.0,
        retry_budget=args.retry_budget if args.retry_budget is not None else 3,
        audit_dir=args.audit_dir,
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_compile(args) -> int:
    try:
        with open(args.rubric, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read rubric {args.rubric}: {exc}") from exc
    raw = bundle_mod.RawRubric(
        text=text,
        scale_min=args.scale_min,
        scale_max=args.scale_max,
        trait_names=tuple(args.trait_names.split(",")) if args.trait_names else None,
    )
    params = bundle_mod.CompileParams(
        traits=args.traits,
        items=args.items,
        min_evidence=args.min_evidence,
        high_score_threshold=args.threshold,
        version=args.version,
        retry_budget=args.retry_budget if args.retry_budget is not None else 3,
    )
    backend = _standalone_backend(args)
    sealed = bundle_mod.compile_rubric(raw, backend, params)
    bundle_mod.save_bundle(sealed, args.out)
    print(f"compiled {len(sealed.taxonomy)} traits, {len(sealed.checklist)} items")
    print(f"digest {sealed.digest}")
    return EXIT_OK


def cmd_verify_bundle(args) -> int:
    sealed = bundle_mod.load_bundle(args.bundle)
    print(f"ok {sealed.digest}")
    return EXIT_OK


def cmd_judge(args) -> int:
    if not args.bundle_path or not args.dataset_path:
        raise ConfigError("judge needs --bundle and --dataset")
    merged_args = args
    if merged_args.output_dir is None:
        merged_args.output_dir = "."  # unused by judge; satisfies RunConfig
    config = build_run_config(merged_args)
    sealed = bundle_mod.load_bundle(config.bundle_path)
    instances = pipe_mod.load_dataset(config.dataset_path)
    backend = pipe_mod.make_backend(config)
    reports = pipe_mod.judge_dataset(sealed, instances, backend, config)
    with open(args.out, "w", encoding="utf-8") as fh:
        for report in reports:
            fh.write(pipe_mod._jline(pipe_mod.report_to_json(report)) + "\n")
    failed = sum(1 for r in reports if r.failed)
    print(f"judged {len(reports)} instances ({failed} failed) -> {args.out}")
    return EXIT_OK


def _uniform_digest(reports) -> str:
    digests = {r.bundle_digest for r in reports}
    if len(digests) != 1:
        raise ConfigError(f"reports mix bundle digests: {sorted(digests)}")
    return digests.pop()


def cmd_calibrate(args) -> int:
    reports = pipe_mod.load_reports(args.reports)
    labels = pipe_mod.labels_of(pipe_mod.load_dataset(args.labels))
    digest = _uniform_digest(reports)
    lam = args.lam if args.lam is not None else 1.0
    cal_map = cal_mod.fit_calibration(reports, labels, digest, lam)
    cal_mod.save_map(cal_map, args.out)
    print(f"fitted on {cal_map.fitted_on} instances -> {args.out}")
    return EXIT_OK


def cmd_score(args) -> int:
    reports = pipe_mod.load_reports(args.reports)
    cal_map = cal_mod.load_map(args.map)
    with open(args.out, "w", encoding="utf-8") as fh:
        for report in sorted(reports, key=lambda r: r.instance_id):
            fh.write(pipe_mod._jline({
                "instance_id": report.instance_id,
                "bundle_digest": report.bundle_digest,
                "score": cal_mod.apply_map(cal_map, report),
                "failed": report.failed,
            }) + "\n")
    print(f"scored {len(reports)} instances -> {args.out}")
    return EXIT_OK


def _load_scores_file(path) -> dict[str, int]:
    scores = {}
    try:
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    doc = json.loads(line)
                    scores[doc["instance_id"]] = int(doc["score"])
                except (ValueError, KeyError, TypeError) as exc:
                    raise ConfigError(f"{path}:{line_no}: bad score row: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read scores {path}: {exc}") from exc
    if not scores:
        raise ConfigError(f"scores file {path} is empty")
    return scores


def _pairs_from_files(scores: dict, labels: dict, score_range) -> metrics_mod.LabelPairSet:
    shared = sorted(set(scores) & set(labels))
    if len(shared) < 2:
        raise ConfigError(f"only {len(shared)} instances have both score and label")
    low, high = score_range if score_range else (None, None)
    return metrics_mod.make_pairs(
        [scores[i] for i in shared],
        [labels[i] for i in shared],
        low,
        high,
        instance_ids=shared,
    )


def cmd_evaluate(args) -> int:
    scores = _load_scores_file(args.scores)
    labels = pipe_mod.labels_of(pipe_mod.load_dataset(args.labels))
    score_range = _parse_range(args.range) if args.range else None
    pairs = _pairs_from_files(scores, labels, score_range)
    label_set = range(pairs.label_min, pairs.label_max + 1)
    summary = metrics_mod.distribution_summary(pairs.predicted, label_set)
    report = {
        "qwk": metrics_mod.qwk(pairs),
        "n": len(pairs),
        "mean": summary["mean"],
        "std": summary["std"],
        "histogram": {str(k): v for k, v in summary["histogram"].items()},
    }
    _print_json(report, args.out)
    return EXIT_OK


def cmd_stability(args) -> int:
    labels = pipe_mod.labels_of(pipe_mod.load_dataset(args.labels))
    try:
        files = sorted(
            f for f in os.listdir(args.runs) if f.endswith(".jsonl")
        )
    except OSError as exc:
        raise ConfigError(f"cannot list runs directory {args.runs}: {exc}") from exc
    if len(files) < 2:
        raise ConfigError(f"runs directory {args.runs} needs >= 2 .jsonl score files")
    score_range = _parse_range(args.range) if args.range else None
    per_variant_scores = {
        os.path.splitext(name)[0]: _load_scores_file(os.path.join(args.runs, name))
        for name in files
    }
    if score_range is None:
        values = [
            v
            for scores in per_variant_scores.values()
            for i, v in scores.items()
            if i in labels
        ] + [labels[i] for scores in per_variant_scores.values() for i in scores if i in labels]
        score_range = (min(values), max(values))
    runs = {
        variant: _pairs_from_files(scores, labels, score_range)
        for variant, scores in per_variant_scores.items()
    }
    report = metrics_mod.stability_report(runs)
    _print_json(metrics_mod.stability_to_json(report), args.out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = build_run_config(args)
    results = pipe_mod.ablate(config)
    _print_json(results, None)
    return EXIT_OK


def cmd_perturb(args) -> int:
    config = build_run_config(args)
    variants = tuple(v.strip() for v in args.variants.split(",") if v.strip())
    report = pipe_mod.perturb_and_compare(config, variants)
    _print_json(metrics_mod.stability_to_json(report), None)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rulers",
        description="Rubric compiler, evidence-gated executor, and score calibrator.",
    )
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compile", help="compile a raw rubric into a locked bundle")
    p.add_argument("--rubric", required=True, help="plain-text rubric file")
    p.add_argument("--traits", type=int, required=True)
    p.add_argument("--items", type=int, required=True)
    p.add_argument("--min-evidence", dest="min_evidence", type=int, required=True)
    p.add_argument("--threshold", type=int, default=None,
                   help="high-score threshold (default scale_max - 1)")
    p.add_argument("--scale-min", dest="scale_min", type=int, default=1)
    p.add_argument("--scale-max", dest="scale_max", type=int, default=6)
    p.add_argument("--trait-names", dest="trait_names", default=None,
                   help="comma-separated trait names")
    p.add_argument("--version", default="1")
    _add_backend_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("verify-bundle", help="recompute and check a bundle digest")
    p.add_argument("bundle")
    p.set_defaults(func=cmd_verify_bundle)

    p = sub.add_parser("judge", help="judge a dataset against a locked bundle")
    _add_run_flags(p)
    p.add_argument("--out", required=True, help="reports JSONL path")
    p.set_defaults(func=cmd_judge)

    p = sub.add_parser("calibrate", help="fit the ridge + quantile map")
    p.add_argument("--reports", required=True)
    p.add_argument("--labels", required=True,
                   help="dataset JSONL carrying human_score")
    p.add_argument("--lambda", dest="lam", type=_parse_lambda, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("score", help="apply a calibration map to reports")
    p.add_argument("--reports", required=True)
    p.add_argument("--map", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("evaluate", help="QWK and distribution vs human labels")
    p.add_argument("--scores", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--range", default=None, help="label range a:b")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("stability", help="compare score files across variants")
    p.add_argument("--runs", required=True,
                   help="directory of <variant>.jsonl score files")
    p.add_argument("--labels", required=True)
    p.add_argument("--range", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("ablate", help="run full/no_locking/no_evidence_gate/no_calibration")
    _add_run_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("perturb", help="run rubric presentation variants and compare")
    _add_run_flags(p)
    p.add_argument("--variants", default="standard,reversed",
                   help="comma-separated render variants")
    p.set_defaults(func=cmd_perturb)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except RulersError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
