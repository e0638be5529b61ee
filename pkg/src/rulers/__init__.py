"""Rubric-locked LLM judging: compile, execute with evidence gating, calibrate.

The package is organized around three phases. Phase I compiles a free-text
rubric into a locked, content-addressed bundle (`bundle`). Phase II runs a
judge backend against the bundle, validates its JSON output, verifies quoted
evidence verbatim, and applies deterministic scoring with an evidence gate
(`executor`, `judge`). Phase III fits a ridge latent plus quantile transport
onto human labels and snaps predictions to attainable labels (`calibration`,
`metrics`). `pipeline` wires the phases into reproducible runs, ablations,
and perturbation studies; `cli` exposes them as subcommands.
"""

from .bundle import (
    ChecklistItem,
    CompileParams,
    EvidenceRules,
    RawRubric,
    RubricBundle,
    Trait,
    VARIANTS,
    bundle_from_json,
    bundle_to_json,
    canonical_serialize,
    compile_rubric,
    hash_bundle,
    load_bundle,
    render,
    save_bundle,
    seal,
)
from .calibration import (
    CalibrationMap,
    FeatureVector,
    QuantileMap,
    RidgeModel,
    apply_map,
    extract_features,
    feature_matrix,
    fit_calibration,
    fit_quantile_map,
    fit_ridge,
    load_map,
    save_map,
    select_lambda,
    snap_label,
    transport,
)
from .errors import (
    AuthError,
    BudgetExhausted,
    BundleIntegrityError,
    CompileSchemaError,
    ConfigError,
    CoverageError,
    DegenerateError,
    DigestMismatchError,
    EmptyTraitError,
    MismatchedInstanceError,
    MissingParaphraseError,
    RulersError,
    SchemaError,
    TemplateError,
    TransportError,
    UnknownUnitError,
)
from .executor import (
    EvidenceQuote,
    InstanceReport,
    JudgeOutput,
    SentenceBank,
    TraitScoreReport,
    Unit,
    apply_evidence_gate,
    build_instance_report,
    execute,
    make_bank,
    report_from_json,
    report_to_json,
    round_half_away,
    score_trait,
    segment,
    validate_output,
    verify_quote,
)
from .judge import (
    HttpJudge,
    MockJudge,
    MockJudgePolicy,
    PhraseRule,
    PromptRequest,
    RetryBudget,
    build_compile_prompt,
    build_holistic_prompt,
    build_scoring_prompt,
    invoke,
    load_policy,
    score_with_repair,
    with_feedback,
)
from .metrics import (
    LabelPairSet,
    StabilityReport,
    distribution_summary,
    make_pairs,
    qwk,
    stability_report,
)
from .pipeline import (
    Instance,
    RunConfig,
    RunResult,
    ablate,
    bank_for,
    judge_dataset,
    labels_of,
    load_dataset,
    load_reports,
    perturb_and_compare,
    run_pipeline,
    save_dataset,
    split_instances,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
