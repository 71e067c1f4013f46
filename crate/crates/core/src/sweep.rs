//! Grid sweeps over risk levels and split ratios with repeated random splits.
//!
//! Each cell reports mean and sample standard deviation across repeats.
//! Abstaining repeats are counted, not averaged.

use serde::{Deserialize, Serialize};

use crate::budget::BudgetDiagnostics;
use crate::budget::first_admissible_indices;
use crate::error::{check_open_unit, invalid, Error, Result};
use crate::filter::{build_calibration_subset, calibrate_threshold, prediction_set};
use crate::metrics::{combined_bound, set_size_stats, stage1_eer, stage2_eer};
use crate::records::{derive_seed, split_calibration_test, AdmissionCriterion, QuestionRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub alpha_grid: Vec<f64>,
    pub beta_grid: Vec<f64>,
    pub ratio_grid: Vec<f64>,
    pub repeats: usize,
    pub delta: f64,
    pub max_samples: usize,
    pub seed: u64,
}

impl SweepConfig {
    fn validate(&self) -> Result<()> {
        for (name, grid) in [
            ("alpha_grid", &self.alpha_grid),
            ("beta_grid", &self.beta_grid),
            ("ratio_grid", &self.ratio_grid),
        ] {
            if grid.is_empty() {
                return Err(invalid(name, "[]", "grid must be nonempty"));
            }
            for &v in grid {
                check_open_unit(name, v)?;
            }
        }
        if self.repeats == 0 {
            return Err(invalid("repeats", 0, "must be at least 1"));
        }
        check_open_unit("delta", self.delta)?;
        if self.max_samples == 0 {
            return Err(invalid("max_samples", 0, "must be at least 1"));
        }
        Ok(())
    }
}

/// Mean and sample standard deviation; the deviation is absent with fewer
/// than two observations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Option<f64>,
    pub sd: Option<f64>,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: None, sd: None };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = (n > 1).then(|| {
            let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
            (ss / (n - 1) as f64).sqrt()
        });
        Self { mean: Some(mean), sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub beta: f64,
    pub split_ratio: f64,
    pub repeats: usize,
    pub n_abstain: usize,
    pub combined_bound: f64,
    pub s_hat: Summary,
    pub stage1_eer: Summary,
    pub stage2_eer_overall: Summary,
    pub stage2_eer_conditional: Summary,
    pub avg_set_size: Summary,
}

pub const SWEEP_CSV_HEADER: &str = "alpha,beta,split_ratio,repeats,n_abstain,combined_bound,s_hat_mean,s_hat_sd,stage1_eer_mean,stage1_eer_sd,stage2_eer_overall_mean,stage2_eer_overall_sd,stage2_eer_conditional_mean,stage2_eer_conditional_sd,avg_set_size_mean,avg_set_size_sd";

impl SweepRow {
    pub fn csv_row(&self) -> String {
        fn o(v: Option<f64>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        let mut cells = vec![
            self.alpha.to_string(),
            self.beta.to_string(),
            self.split_ratio.to_string(),
            self.repeats.to_string(),
            self.n_abstain.to_string(),
            self.combined_bound.to_string(),
        ];
        for s in [
            self.s_hat,
            self.stage1_eer,
            self.stage2_eer_overall,
            self.stage2_eer_conditional,
            self.avg_set_size,
        ] {
            cells.push(o(s.mean));
            cells.push(o(s.sd));
        }
        cells.join(",")
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Default)]
struct Cell {
    n_abstain: usize,
    s_hat: Vec<f64>,
    stage1: Vec<f64>,
    overall: Vec<f64>,
    conditional: Vec<f64>,
    set_size: Vec<f64>,
}

/// Rows ordered by alpha, then beta, then split ratio.
pub fn run_sweep(
    records: &[QuestionRecord],
    crit: &AdmissionCriterion,
    cfg: &SweepConfig,
) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (na, nb, nr) = (cfg.alpha_grid.len(), cfg.beta_grid.len(), cfg.ratio_grid.len());
    let mut cells: Vec<Cell> = (0..na * nb * nr).map(|_| Cell::default()).collect();
    let cell_index = |ai: usize, bi: usize, ri: usize| (ai * nb + bi) * nr + ri;

    for (ri, &ratio) in cfg.ratio_grid.iter().enumerate() {
        for rep in 0..cfg.repeats {
            let (cal, test) = split_calibration_test(records, ratio, derive_seed(cfg.seed, rep as u64))?;
            if cal.is_empty() || test.is_empty() {
                return Err(invalid("split_ratio", ratio, "leaves an empty calibration or test part"));
            }
            let first = first_admissible_indices(&cal, crit, cfg.max_samples)?;
            let diagnostics = BudgetDiagnostics::from_first_admissible(&first, cfg.delta, cfg.max_samples)?;
            for (ai, &alpha) in cfg.alpha_grid.iter().enumerate() {
                let Some(s_hat) = diagnostics.select(alpha)?.s_hat() else {
                    for bi in 0..nb {
                        cells[cell_index(ai, bi, ri)].n_abstain += 1;
                    }
                    continue;
                };
                let u_stars = build_calibration_subset(&cal, s_hat, crit)?;
                let s1 = stage1_eer(&test, s_hat, crit)?;
                for (bi, &beta) in cfg.beta_grid.iter().enumerate() {
                    let t_hat = calibrate_threshold(&u_stars, beta)?.t_hat;
                    let s2 = stage2_eer(&test, s_hat, t_hat, crit)?;
                    let sets = test
                        .iter()
                        .map(|r| prediction_set(r, s_hat, t_hat))
                        .collect::<Result<Vec<_>>>()?;
                    let cell = &mut cells[cell_index(ai, bi, ri)];
                    cell.s_hat.push(s_hat as f64);
                    cell.stage1.push(s1);
                    cell.overall.push(s2.overall);
                    if let Some(c) = s2.conditional {
                        cell.conditional.push(c);
                    }
                    cell.set_size.push(set_size_stats(&sets)?.mean);
                }
            }
        }
    }

    let mut rows = Vec::with_capacity(cells.len());
    for (ai, &alpha) in cfg.alpha_grid.iter().enumerate() {
        for (bi, &beta) in cfg.beta_grid.iter().enumerate() {
            for (ri, &ratio) in cfg.ratio_grid.iter().enumerate() {
                let cell = &cells[cell_index(ai, bi, ri)];
                rows.push(SweepRow {
                    alpha,
                    beta,
                    split_ratio: ratio,
                    repeats: cfg.repeats,
                    n_abstain: cell.n_abstain,
                    combined_bound: combined_bound(alpha, beta)?,
                    s_hat: Summary::of(&cell.s_hat),
                    stage1_eer: Summary::of(&cell.stage1),
                    stage2_eer_overall: Summary::of(&cell.overall),
                    stage2_eer_conditional: Summary::of(&cell.conditional),
                    avg_set_size: Summary::of(&cell.set_size),
                });
            }
        }
    }
    Ok(rows)
}
