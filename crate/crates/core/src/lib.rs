//! Two-stage risk control for open-ended question answering.
//!
//! Stage I picks the smallest per-question sampling budget whose exact
//! (Clopper–Pearson) upper bound on miscoverage stays under `alpha`, or
//! abstains when no budget up to the cap qualifies. Stage II calibrates an
//! uncertainty threshold with conformal risk control so that filtering the
//! sampled candidates loses an admissible answer with probability at most
//! `beta`. Together the final prediction sets miss with probability at most
//! `alpha + beta - alpha * beta`, with confidence `1 - delta` over the
//! calibration draw.

pub mod budget;
pub mod error;
pub mod exact_bounds;
pub mod filter;
pub mod ingest;
pub mod metrics;
pub mod pipeline;
pub mod records;
pub mod simulate;
pub mod sweep;

pub use budget::{calibrate_budget, count_failures, risk_upper_curve, BudgetDiagnostics, BudgetOutcome, BudgetRow};
pub use error::{Error, Result};
pub use exact_bounds::{binomial_cdf, clopper_pearson_upper};
pub use filter::{
    average_loss, build_calibration_subset, calibrate_threshold, min_admissible_uncertainty,
    prediction_set, FilterCalibration, PredictionSet, Threshold,
};
pub use ingest::{parse_dataset, rouge_l, DatasetFile, IngestError};
pub use metrics::{combined_bound, set_size_stats, stage1_eer, stage2_eer, EvaluationReport, Stage2Eer};
pub use pipeline::{calibrate, evaluate, CalibrationArtifact};
pub use records::{
    is_admissible, split_calibration_test, AdmissionCriterion, Candidate, QuestionRecord, RiskConfig,
};
pub use simulate::{generate_population, true_stage1_risk, validate_guarantees, GuaranteeReport, SimSpec};
