//! Synthetic populations with a closed-form true miscoverage, and a Monte
//! Carlo harness that checks the calibration guarantees against it.
//!
//! Generative model, per question: with probability `pi0` the question is
//! unanswerable (`p = 0`), otherwise `p ~ Beta(a, b)`. Each of the `M`
//! candidates is independently admissible with probability `p`. Admissible
//! candidates get a relevance score `~ U(lambda_a, 1]` and a log-normal
//! uncertainty with the admissible parameters; inadmissible ones get
//! `~ U[0, lambda_a)` and the inadmissible parameters. The true stage-1
//! risk at budget `s` is therefore `E[(1 - p)^s]`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, LogNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::filter::Threshold;
use crate::metrics::combined_bound;
use crate::pipeline::{calibrate, evaluate};
use crate::records::{derive_seed, split_calibration_test, AdmissionCriterion, Candidate, QuestionRecord, RiskConfig};

/// Score name carried by generated candidates.
pub const SIM_CRITERION: &str = "similarity";

/// Generator and harness settings. Every field has a default, so a config
/// file only needs the keys it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSpec {
    pub n_questions: usize,
    /// Mass of unanswerable questions.
    pub pi0: f64,
    pub beta_a: f64,
    pub beta_b: f64,
    pub max_samples: usize,
    pub adm_unc_log_mean: f64,
    pub adm_unc_log_sd: f64,
    pub inadm_unc_log_mean: f64,
    pub inadm_unc_log_sd: f64,
    pub lambda_a: f64,
    pub trials: usize,
    pub split_ratio: f64,
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub seed: u64,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            n_questions: 1000,
            pi0: 0.02,
            beta_a: 2.0,
            beta_b: 2.0,
            max_samples: 20,
            adm_unc_log_mean: 0.0,
            adm_unc_log_sd: 0.5,
            inadm_unc_log_mean: 0.7,
            inadm_unc_log_sd: 0.5,
            lambda_a: 0.6,
            trials: 1000,
            split_ratio: 0.5,
            alpha: 0.10,
            beta: 0.10,
            delta: 0.05,
            seed: 2024,
        }
    }
}

impl SimSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::SimSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::SimSpec(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("sim spec serializes to TOML")
    }

    pub fn risk_config(&self) -> RiskConfig {
        RiskConfig {
            alpha: self.alpha,
            beta: self.beta,
            delta: self.delta,
            max_samples: self.max_samples,
            split_ratio: self.split_ratio,
            seed: self.seed,
        }
    }

    pub fn criterion(&self) -> AdmissionCriterion {
        AdmissionCriterion::new(SIM_CRITERION, self.lambda_a).expect("lambda_a validated")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::SimSpec(msg.to_owned()));
        if self.n_questions < 2 {
            return bad("n_questions must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.pi0) {
            return bad("pi0 must lie in [0, 1]");
        }
        if !(self.beta_a.is_finite() && self.beta_a > 0.0 && self.beta_b.is_finite() && self.beta_b > 0.0) {
            return bad("beta_a and beta_b must be positive");
        }
        if self.max_samples == 0 {
            return bad("max_samples must be at least 1");
        }
        for (name, sd) in [("adm_unc_log_sd", self.adm_unc_log_sd), ("inadm_unc_log_sd", self.inadm_unc_log_sd)] {
            if !(sd.is_finite() && sd >= 0.0) {
                return Err(Error::SimSpec(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.adm_unc_log_mean.is_finite() && self.inadm_unc_log_mean.is_finite()) {
            return bad("log means must be finite");
        }
        if !(self.lambda_a > 0.0 && self.lambda_a <= 1.0) {
            return bad("lambda_a must lie in (0, 1]");
        }
        if self.trials == 0 {
            return bad("trials must be at least 1");
        }
        self.risk_config().validate()?;
        let n_cal = (self.split_ratio * self.n_questions as f64).round() as usize;
        if n_cal == 0 || n_cal >= self.n_questions {
            return bad("split_ratio leaves an empty calibration or test part");
        }
        Ok(())
    }
}

/// `pi0 + (1 - pi0) B(a, b + s) / B(a, b)`, evaluated as the product
/// `prod_{j < s} (b + j) / (a + b + j)`.
pub fn true_stage1_risk(spec: &SimSpec, s: usize) -> Result<f64> {
    if s == 0 {
        return Err(invalid("s", s, "budget must be at least 1"));
    }
    let (a, b) = (spec.beta_a, spec.beta_b);
    let ratio: f64 = (0..s).map(|j| (b + j as f64) / (a + b + j as f64)).product();
    Ok(spec.pi0 + (1.0 - spec.pi0) * ratio)
}

pub fn generate_population(spec: &SimSpec, seed: u64) -> Result<Vec<QuestionRecord>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ability = Beta::new(spec.beta_a, spec.beta_b).map_err(|e| Error::SimSpec(e.to_string()))?;
    let adm_unc = LogNormal::new(spec.adm_unc_log_mean, spec.adm_unc_log_sd)
        .map_err(|e| Error::SimSpec(e.to_string()))?;
    let inadm_unc = LogNormal::new(spec.inadm_unc_log_mean, spec.inadm_unc_log_sd)
        .map_err(|e| Error::SimSpec(e.to_string()))?;
    let lambda = spec.lambda_a;

    (0..spec.n_questions)
        .map(|i| {
            let p = if rng.random::<f64>() < spec.pi0 {
                0.0
            } else {
                ability.sample(&mut rng)
            };
            let candidates = (1..=spec.max_samples)
                .map(|j| {
                    let admissible = rng.random::<f64>() < p;
                    let u: f64 = rng.random();
                    let (score, unc) = if admissible {
                        // 1 - u lies in (0, 1], so the score lies in (lambda, 1]
                        (lambda + (1.0 - lambda) * (1.0 - u), adm_unc.sample(&mut rng))
                    } else {
                        (lambda * u, inadm_unc.sample(&mut rng))
                    };
                    let scores = BTreeMap::from([(SIM_CRITERION.to_owned(), score)]);
                    Candidate::new(j, unc, scores, None)
                })
                .collect::<Result<Vec<_>>>()?;
            QuestionRecord::new(format!("q{i}"), None, None, candidates)
        })
        .collect()
}

/// Outcome of one calibration/test draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial: usize,
    pub seed: u64,
    pub abstain: bool,
    pub s_hat: Option<usize>,
    pub t_hat: Option<Threshold>,
    pub n_prime: Option<usize>,
    pub stage1_bound: f64,
    pub true_risk: Option<f64>,
    pub stage1_eer: Option<f64>,
    pub stage2_eer_overall: Option<f64>,
    pub stage2_eer_conditional: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuaranteeReport {
    pub spec: SimSpec,
    pub n_trials: usize,
    pub abstain_fraction: f64,
    /// Among non-abstaining trials, the fraction with true risk at `s_hat`
    /// above `alpha`.
    pub stage1_violation_fraction: Option<f64>,
    /// Mean stage-2 miscoverage among test records covered at stage 1.
    pub stage2_conditional_mean: Option<f64>,
    /// Among non-abstaining trials, the fraction whose overall test EER
    /// exceeds `alpha + beta - alpha beta`.
    pub combined_violation_fraction: Option<f64>,
    pub combined_bound: f64,
    pub mean_stage1_eer: Option<f64>,
    pub mean_stage2_eer_overall: Option<f64>,
    pub trials: Vec<TrialRow>,
}

impl GuaranteeReport {
    pub fn trials_csv(&self) -> String {
        fn opt<T: ToString>(v: Option<T>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        let mut out = String::from(
            "trial,seed,abstain,s_hat,t_hat,n_prime,stage1_bound,true_risk,stage1_eer,stage2_eer_overall,stage2_eer_conditional\n",
        );
        for r in &self.trials {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.trial,
                r.seed,
                r.abstain,
                opt(r.s_hat),
                opt(r.t_hat),
                opt(r.n_prime),
                r.stage1_bound,
                opt(r.true_risk),
                opt(r.stage1_eer),
                opt(r.stage2_eer_overall),
                opt(r.stage2_eer_conditional),
            ));
        }
        out
    }
}

fn run_trial(spec: &SimSpec, trial: usize) -> Result<TrialRow> {
    let seed = derive_seed(spec.seed, trial as u64);
    let population = generate_population(spec, seed)?;
    let (cal, test) = split_calibration_test(&population, spec.split_ratio, derive_seed(seed, 1))?;
    let artifact = calibrate(&cal, &spec.criterion(), &spec.risk_config(), Some(seed))?;
    let mut row = TrialRow {
        trial,
        seed,
        abstain: artifact.abstain,
        s_hat: artifact.s_hat,
        t_hat: artifact.t_hat,
        n_prime: artifact.n_prime,
        stage1_bound: artifact.stage1_bound,
        true_risk: None,
        stage1_eer: None,
        stage2_eer_overall: None,
        stage2_eer_conditional: None,
    };
    if let Some(s_hat) = artifact.s_hat {
        let report = evaluate(&artifact, &test)?;
        row.true_risk = Some(true_stage1_risk(spec, s_hat)?);
        row.stage1_eer = Some(report.stage1_eer);
        row.stage2_eer_overall = Some(report.stage2_eer_overall);
        row.stage2_eer_conditional = report.stage2_eer_conditional;
    }
    Ok(row)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn fraction(flags: impl Iterator<Item = bool>) -> Option<f64> {
    mean(flags.map(|b| if b { 1.0 } else { 0.0 }))
}

/// Runs `spec.trials` independent generate/split/calibrate/evaluate rounds.
/// Each trial seeds itself from `(spec.seed, trial)`, so the report does not
/// depend on thread scheduling.
pub fn validate_guarantees(spec: &SimSpec) -> Result<GuaranteeReport> {
    spec.validate()?;
    let trials = (0..spec.trials)
        .into_par_iter()
        .map(|t| run_trial(spec, t))
        .collect::<Result<Vec<_>>>()?;
    let bound = combined_bound(spec.alpha, spec.beta)?;
    let live = || trials.iter().filter(|r| !r.abstain);
    Ok(GuaranteeReport {
        spec: spec.clone(),
        n_trials: trials.len(),
        abstain_fraction: fraction(trials.iter().map(|r| r.abstain)).unwrap_or(0.0),
        stage1_violation_fraction: fraction(live().map(|r| r.true_risk.unwrap_or(1.0) > spec.alpha)),
        stage2_conditional_mean: mean(live().filter_map(|r| r.stage2_eer_conditional)),
        combined_violation_fraction: fraction(live().map(|r| r.stage2_eer_overall.unwrap_or(1.0) > bound)),
        combined_bound: bound,
        mean_stage1_eer: mean(live().filter_map(|r| r.stage1_eer)),
        mean_stage2_eer_overall: mean(live().filter_map(|r| r.stage2_eer_overall)),
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::budget::count_failures;

    /// Composite Simpson rule on `[0, 1]`.
    fn simpson(f: impl Fn(f64) -> f64, intervals: usize) -> f64 {
        let h = 1.0 / intervals as f64;
        let mut acc = f(0.0) + f(1.0);
        for i in 1..intervals {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(i as f64 * h);
        }
        acc * h / 3.0
    }

    fn spec_with(pi0: f64, a: f64, b: f64) -> SimSpec {
        SimSpec {
            pi0,
            beta_a: a,
            beta_b: b,
            ..SimSpec::default()
        }
    }

    #[test]
    fn true_risk_examples() {
        for s in 1..5 {
            assert_eq!(true_stage1_risk(&spec_with(1.0, 2.0, 3.0), s).unwrap(), 1.0);
        }
        assert!((true_stage1_risk(&spec_with(0.0, 1.0, 1.0), 1).unwrap() - 0.5).abs() < 1e-15);
        assert!((true_stage1_risk(&spec_with(0.0, 1.0, 1.0), 3).unwrap() - 0.25).abs() < 1e-15);
        assert!(true_stage1_risk(&SimSpec::default(), 0).is_err());
    }

    #[test]
    fn true_risk_matches_numeric_integration() {
        for (a, b) in [(1.0, 1.0), (2.0, 2.0), (3.5, 2.5), (1.0, 4.0)] {
            let kernel = |p: f64, s: i32| p.powf(a - 1.0) * (1.0 - p).powf(b - 1.0) * (1.0 - p).powi(s);
            let norm = simpson(|p| kernel(p, 0), 20_000);
            for s in [1usize, 3, 7, 20] {
                let numeric = 0.02 + 0.98 * simpson(|p| kernel(p, s as i32), 20_000) / norm;
                let closed = true_stage1_risk(&spec_with(0.02, a, b), s).unwrap();
                assert!((numeric - closed).abs() < 1e-9, "a={a} b={b} s={s}: {numeric} vs {closed}");
            }
        }
    }

    #[test]
    fn unanswerable_population_always_fails() {
        let spec = SimSpec {
            n_questions: 50,
            max_samples: 5,
            ..spec_with(1.0, 2.0, 2.0)
        };
        let pop = generate_population(&spec, 3).unwrap();
        assert_eq!(count_failures(&pop, 5, &spec.criterion()).unwrap(), 50);
    }

    #[test]
    fn near_certain_ability_rarely_fails() {
        let spec = SimSpec {
            n_questions: 2000,
            max_samples: 1,
            ..spec_with(0.0, 500.0, 1.0)
        };
        let pop = generate_population(&spec, 11).unwrap();
        let rate = count_failures(&pop, 1, &spec.criterion()).unwrap() as f64 / 2000.0;
        // true rate 1/501
        assert!(rate < 0.01, "rate {rate}");
    }

    #[test]
    fn empirical_rate_converges_to_true_risk() {
        let spec = SimSpec {
            n_questions: 10_000,
            max_samples: 6,
            ..spec_with(0.0, 1.0, 1.0)
        };
        let pop = generate_population(&spec, 5).unwrap();
        let n = spec.n_questions as f64;
        for s in 1..=6 {
            let truth = true_stage1_risk(&spec, s).unwrap();
            let rate = count_failures(&pop, s, &spec.criterion()).unwrap() as f64 / n;
            let se = (truth * (1.0 - truth) / n).sqrt();
            let k = if s == 3 { 3.0 } else { 4.0 };
            assert!((rate - truth).abs() <= k * se, "s={s}: {rate} vs {truth}");
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let spec = SimSpec {
            n_questions: 40,
            ..SimSpec::default()
        };
        let a = crate::ingest::serialize_records(&generate_population(&spec, 9).unwrap());
        let b = crate::ingest::serialize_records(&generate_population(&spec, 9).unwrap());
        let c = crate::ingest::serialize_records(&generate_population(&spec, 10).unwrap());
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn generated_scores_respect_threshold_classes() {
        let spec = SimSpec {
            n_questions: 200,
            ..SimSpec::default()
        };
        for rec in generate_population(&spec, 1).unwrap() {
            for c in rec.candidates() {
                let score = c.score(SIM_CRITERION).unwrap();
                assert!((0.0..=1.0).contains(&score));
                assert!(c.uncertainty() > 0.0);
            }
        }
    }

    #[test]
    fn easy_population_never_abstains() {
        let spec = SimSpec {
            n_questions: 1000,
            max_samples: 2,
            trials: 20,
            ..spec_with(0.0, 10_000.0, 0.01)
        };
        let report = validate_guarantees(&spec).unwrap();
        assert_eq!(report.abstain_fraction, 0.0);
        assert_eq!(report.stage1_violation_fraction, Some(0.0));
        assert_eq!(report.trials.len(), 20);
    }

    #[test]
    fn large_unanswerable_mass_abstains() {
        let spec = SimSpec {
            n_questions: 600,
            max_samples: 4,
            trials: 10,
            ..spec_with(0.3, 2.0, 2.0)
        };
        assert!(true_stage1_risk(&spec, 4).unwrap() > spec.alpha);
        let report = validate_guarantees(&spec).unwrap();
        assert_eq!(report.abstain_fraction, 1.0);
        assert_eq!(report.stage1_violation_fraction, None);
        assert_eq!(report.stage2_conditional_mean, None);
    }

    #[test]
    fn report_is_reproducible() {
        let spec = SimSpec {
            n_questions: 200,
            trials: 8,
            ..SimSpec::default()
        };
        let a = validate_guarantees(&spec).unwrap();
        let b = validate_guarantees(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trials_csv(), b.trials_csv());
        assert_eq!(a.trials_csv().lines().count(), 9);
    }

    #[test]
    fn spec_file_round_trip_and_validation() {
        let spec = SimSpec::default();
        assert_eq!(SimSpec::from_toml_str(&spec.to_toml_string()).unwrap(), spec);
        let partial = SimSpec::from_toml_str("trials = 3\npi0 = 0.1\n").unwrap();
        assert_eq!((partial.trials, partial.pi0, partial.max_samples), (3, 0.1, 20));
        assert!(SimSpec::from_toml_str("bogus = 1").is_err());
        assert!(SimSpec::from_toml_str("trials = 0").is_err());
        assert!(SimSpec::from_toml_str("split_ratio = 0.0001").is_err());
    }
}
