//! End-to-end calibration, test-time filtering and evaluation.

use serde::{Deserialize, Serialize};

use crate::budget::{calibrate_budget, BudgetOutcome, BudgetRow};
use crate::error::{Error, Result};
use crate::filter::{build_calibration_subset, calibrate_threshold, prediction_set, PredictionSet, Threshold};
use crate::metrics::{combined_bound, set_size_stats, stage1_eer, stage2_eer, EvaluationReport};
use crate::records::{AdmissionCriterion, QuestionRecord, RiskConfig};

/// Everything needed to filter and evaluate test data, plus the settings
/// that produced it.
///
/// `abstain` is set exactly when `s_hat` and `t_hat` are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationArtifact {
    pub abstain: bool,
    pub s_hat: Option<usize>,
    pub t_hat: Option<Threshold>,
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub max_samples: usize,
    pub criterion: String,
    pub lambda_a: f64,
    pub split_seed: Option<u64>,
    pub n_cal: usize,
    pub n_prime: Option<usize>,
    /// Upper bound at the selected budget, or at `M` when abstaining.
    pub stage1_bound: f64,
    pub target_level: Option<f64>,
    pub diagnostics: Vec<BudgetRow>,
}

impl CalibrationArtifact {
    pub fn criterion(&self) -> Result<AdmissionCriterion> {
        AdmissionCriterion::new(self.criterion.clone(), self.lambda_a)
    }

    /// `(s_hat, t_hat)`, or [`Error::Abstained`].
    pub fn parameters(&self) -> Result<(usize, Threshold)> {
        match (self.abstain, self.s_hat, self.t_hat) {
            (false, Some(s), Some(t)) => Ok((s, t)),
            (true, None, None) => Err(Error::Abstained),
            _ => Err(Error::InvalidParameter {
                name: "artifact",
                value: format!("abstain={} s_hat={:?} t_hat={:?}", self.abstain, self.s_hat, self.t_hat),
                reason: "abstain flag must be set exactly when s_hat and t_hat are absent",
            }),
        }
    }
}

/// Stage I then, unless it abstains, stage II on the same calibration data.
pub fn calibrate(
    records: &[QuestionRecord],
    crit: &AdmissionCriterion,
    cfg: &RiskConfig,
    split_seed: Option<u64>,
) -> Result<CalibrationArtifact> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    let outcome = calibrate_budget(records, crit, cfg.alpha, cfg.delta, cfg.max_samples)?;
    let mut artifact = CalibrationArtifact {
        abstain: true,
        s_hat: None,
        t_hat: None,
        alpha: cfg.alpha,
        beta: cfg.beta,
        delta: cfg.delta,
        max_samples: cfg.max_samples,
        criterion: crit.name().to_owned(),
        lambda_a: crit.lambda_a(),
        split_seed,
        n_cal: records.len(),
        n_prime: None,
        stage1_bound: 1.0,
        target_level: None,
        diagnostics: outcome.diagnostics().rows.clone(),
    };
    match outcome {
        BudgetOutcome::Abstain { bound_at_max, .. } => {
            artifact.stage1_bound = bound_at_max;
        }
        BudgetOutcome::Calibrated { s_hat, diagnostics } => {
            let u_stars = build_calibration_subset(records, s_hat, crit)?;
            let filter = calibrate_threshold(&u_stars, cfg.beta)?;
            artifact.abstain = false;
            artifact.s_hat = Some(s_hat);
            artifact.t_hat = Some(filter.t_hat);
            artifact.n_prime = Some(filter.n_prime);
            artifact.target_level = Some(filter.target_level);
            artifact.stage1_bound = diagnostics.rows[s_hat - 1].upper_bound;
        }
    }
    Ok(artifact)
}

/// Filtered prediction set for every record.
pub fn apply(artifact: &CalibrationArtifact, records: &[QuestionRecord]) -> Result<Vec<PredictionSet>> {
    let (s_hat, t_hat) = artifact.parameters()?;
    records.iter().map(|r| prediction_set(r, s_hat, t_hat)).collect()
}

pub fn evaluate(artifact: &CalibrationArtifact, test_records: &[QuestionRecord]) -> Result<EvaluationReport> {
    let (s_hat, t_hat) = artifact.parameters()?;
    let crit = artifact.criterion()?;
    let stage1 = stage1_eer(test_records, s_hat, &crit)?;
    let stage2 = stage2_eer(test_records, s_hat, t_hat, &crit)?;
    let sets = apply(artifact, test_records)?;
    let sizes = set_size_stats(&sets)?;
    let empty = sets.iter().filter(|s| s.is_empty()).count();
    Ok(EvaluationReport {
        n_test: test_records.len(),
        stage1_eer: stage1,
        stage2_eer_overall: stage2.overall,
        stage2_eer_conditional: stage2.conditional,
        n_conditional: stage2.n_conditional,
        avg_budget: s_hat as f64,
        avg_set_size: sizes.mean,
        empty_set_rate: empty as f64 / sets.len() as f64,
        alpha: artifact.alpha,
        beta: artifact.beta,
        delta: artifact.delta,
        combined_bound: combined_bound(artifact.alpha, artifact.beta)?,
    })
}
