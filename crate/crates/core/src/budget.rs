//! Stage I: sampling-budget calibration with abstention.
//!
//! For each budget `s = 1..=M` the number of calibration records whose first
//! `s` candidates are all inadmissible is turned into an exact upper
//! confidence bound on the miscoverage rate. The calibrated budget is the
//! smallest `s` whose bound is at most `alpha`; if even `M` fails, the
//! procedure abstains.
//!
//! Failure counts are non-increasing in `s`, so the bound curve is too, and
//! the first budget that passes is the minimal one.

use serde::{Deserialize, Serialize};

use crate::error::{check_open_unit, invalid, Error, Result};
use crate::exact_bounds::clopper_pearson_upper;
use crate::records::{AdmissionCriterion, QuestionRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub s: usize,
    pub failures: usize,
    pub empirical_rate: f64,
    pub upper_bound: f64,
}

/// Per-budget miscoverage curve for `s = 1..=M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetDiagnostics {
    pub n: usize,
    pub delta: f64,
    pub rows: Vec<BudgetRow>,
}

impl BudgetDiagnostics {
    pub fn max_samples(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, s: usize) -> Option<&BudgetRow> {
        s.checked_sub(1).and_then(|i| self.rows.get(i))
    }

    /// Builds the curve from per-record first-admissible indices
    /// (`None` = no admissible candidate within the cap).
    pub fn from_first_admissible(
        first: &[Option<usize>],
        delta: f64,
        max_samples: usize,
    ) -> Result<Self> {
        check_open_unit("delta", delta)?;
        if first.is_empty() {
            return Err(Error::EmptyInput);
        }
        if max_samples == 0 {
            return Err(invalid("max_samples", 0, "must be at least 1"));
        }
        let n = first.len();
        // hist[j] = records first covered at budget j; uncovered never enter it
        let mut hist = vec![0usize; max_samples + 1];
        for idx in first.iter().flatten() {
            if *idx <= max_samples {
                hist[*idx] += 1;
            }
        }
        let mut failures = n;
        let mut rows = Vec::with_capacity(max_samples);
        for s in 1..=max_samples {
            failures -= hist[s];
            rows.push(BudgetRow {
                s,
                failures,
                empirical_rate: failures as f64 / n as f64,
                upper_bound: clopper_pearson_upper(failures as u64, n as u64, delta)?,
            });
        }
        Ok(Self { n, delta, rows })
    }

    /// Smallest budget whose bound is at most `alpha`, or abstention.
    pub fn select(&self, alpha: f64) -> Result<BudgetOutcome> {
        check_open_unit("alpha", alpha)?;
        let hit = self.rows.iter().find(|r| r.upper_bound <= alpha);
        Ok(match hit {
            Some(row) => BudgetOutcome::Calibrated {
                s_hat: row.s,
                diagnostics: self.clone(),
            },
            None => BudgetOutcome::Abstain {
                bound_at_max: self.rows.last().map_or(1.0, |r| r.upper_bound),
                diagnostics: self.clone(),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BudgetOutcome {
    Calibrated {
        s_hat: usize,
        diagnostics: BudgetDiagnostics,
    },
    Abstain {
        bound_at_max: f64,
        diagnostics: BudgetDiagnostics,
    },
}

impl BudgetOutcome {
    pub fn s_hat(&self) -> Option<usize> {
        match self {
            Self::Calibrated { s_hat, .. } => Some(*s_hat),
            Self::Abstain { .. } => None,
        }
    }

    pub fn is_abstain(&self) -> bool {
        matches!(self, Self::Abstain { .. })
    }

    pub fn diagnostics(&self) -> &BudgetDiagnostics {
        match self {
            Self::Calibrated { diagnostics, .. } | Self::Abstain { diagnostics, .. } => diagnostics,
        }
    }
}

/// Number of records whose first `s` candidates are all inadmissible.
pub fn count_failures(
    records: &[QuestionRecord],
    s: usize,
    crit: &AdmissionCriterion,
) -> Result<usize> {
    let mut failures = 0;
    for rec in records {
        if !rec.covered(s, crit)? {
            failures += 1;
        }
    }
    Ok(failures)
}

/// First admissible index within the `M`-prefix of every record. Records
/// with fewer than `M` candidates are rejected rather than truncated.
pub fn first_admissible_indices(
    records: &[QuestionRecord],
    crit: &AdmissionCriterion,
    max_samples: usize,
) -> Result<Vec<Option<usize>>> {
    records
        .iter()
        .map(|rec| rec.first_admissible(max_samples, crit))
        .collect()
}

/// Empirical and upper-bound miscoverage for every budget `1..=M`.
pub fn risk_upper_curve(
    records: &[QuestionRecord],
    crit: &AdmissionCriterion,
    delta: f64,
    max_samples: usize,
) -> Result<BudgetDiagnostics> {
    let first = first_admissible_indices(records, crit, max_samples)?;
    BudgetDiagnostics::from_first_admissible(&first, delta, max_samples)
}

pub fn calibrate_budget(
    records: &[QuestionRecord],
    crit: &AdmissionCriterion,
    alpha: f64,
    delta: f64,
    max_samples: usize,
) -> Result<BudgetOutcome> {
    check_open_unit("alpha", alpha)?;
    risk_upper_curve(records, crit, delta, max_samples)?.select(alpha)
}

#[cfg(test)]
pub(crate) mod test_support {
    use std::collections::BTreeMap;

    use crate::records::{Candidate, QuestionRecord};

    /// Record with `m` candidates whose `first`-th candidate (1-based) is the
    /// first admissible one under `("sim", 0.5)`; every later one is
    /// admissible too. Uncertainties are supplied per candidate.
    pub fn record_with(id: &str, m: usize, first: Option<usize>, unc: &[f64]) -> QuestionRecord {
        let candidates = (1..=m)
            .map(|j| {
                let ok = first.is_some_and(|f| j >= f);
                let scores = BTreeMap::from([("sim".to_string(), if ok { 0.9 } else { 0.1 })]);
                let u = unc.get(j - 1).copied().unwrap_or(1.0);
                Candidate::new(j, u, scores, None).unwrap()
            })
            .collect();
        QuestionRecord::new(id, None, None, candidates).unwrap()
    }

    pub fn records(m: usize, firsts: &[Option<usize>]) -> Vec<QuestionRecord> {
        firsts
            .iter()
            .enumerate()
            .map(|(i, f)| record_with(&format!("r{i}"), m, *f, &[]))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::records;
    use super::*;
    use proptest::prelude::*;

    fn crit() -> AdmissionCriterion {
        AdmissionCriterion::new("sim", 0.5).unwrap()
    }

    #[test]
    fn count_failures_examples() {
        let all_first = records(4, &[Some(1); 6]);
        for s in 1..=4 {
            assert_eq!(count_failures(&all_first, s, &crit()).unwrap(), 0);
        }
        let none = records(4, &[None; 6]);
        assert_eq!(count_failures(&none, 4, &crit()).unwrap(), 6);
        // first-admissible {1, 2, 3, none}; at s = 2 the last two fail
        let mixed = records(4, &[Some(1), Some(2), Some(3), None]);
        assert_eq!(count_failures(&mixed, 2, &crit()).unwrap(), 2);
    }

    #[test]
    fn short_record_is_an_error() {
        let recs = records(3, &[Some(1)]);
        let err = count_failures(&recs, 4, &crit()).unwrap_err();
        assert!(matches!(err, Error::InsufficientSamples { ref record, .. } if record == "r0"));
        assert!(risk_upper_curve(&recs, &crit(), 0.05, 4).is_err());
    }

    #[test]
    fn flat_curve_with_zero_failures() {
        let recs = records(5, &[Some(1); 100]);
        let diag = risk_upper_curve(&recs, &crit(), 0.05, 5).unwrap();
        for row in &diag.rows {
            assert_eq!(row.failures, 0);
            assert!((row.upper_bound - 0.029_513_049_607_039_93).abs() < 1e-10);
        }
    }

    #[test]
    fn single_failure_in_ten() {
        let mut firsts = vec![Some(1); 9];
        firsts.push(Some(2));
        let diag = risk_upper_curve(&records(2, &firsts), &crit(), 0.05, 2).unwrap();
        assert_eq!(diag.rows[0].failures, 1);
        assert!((diag.rows[0].empirical_rate - 0.1).abs() < 1e-15);
        assert!((diag.rows[0].upper_bound - 0.394_163_302_436_504_66).abs() < 1e-10);
    }

    #[test]
    fn calibration_examples() {
        let recs = records(3, &[Some(1); 100]);
        let out = calibrate_budget(&recs, &crit(), 0.05, 0.05, 3).unwrap();
        assert_eq!(out.s_hat(), Some(1));
        match calibrate_budget(&recs, &crit(), 0.01, 0.05, 3).unwrap() {
            BudgetOutcome::Abstain { bound_at_max, .. } => {
                assert!((bound_at_max - 0.029_513_049_607_039_93).abs() < 1e-10)
            }
            other => panic!("expected abstention, got {other:?}"),
        }
        let mixed = records(3, &[Some(1), Some(2), None, Some(3)]);
        assert_eq!(
            calibrate_budget(&mixed, &crit(), 0.999, 0.05, 3).unwrap().s_hat(),
            Some(1)
        );
    }

    #[test]
    fn boundary_tie_counts_as_pass() {
        let diag = BudgetDiagnostics::from_first_admissible(&[Some(1); 100], 0.05, 2).unwrap();
        let bound = diag.rows[0].upper_bound;
        assert_eq!(diag.select(bound).unwrap().s_hat(), Some(1));
    }

    fn arb_firsts() -> impl Strategy<Value = (usize, Vec<Option<usize>>)> {
        (1usize..8).prop_flat_map(|m| {
            (
                Just(m),
                prop::collection::vec(prop::option::weighted(0.8, 1..=m + 2), 1..60),
            )
        })
    }

    proptest! {
        #[test]
        fn curve_is_non_increasing((m, firsts) in arb_firsts(), delta in 0.01f64..0.3) {
            let diag = BudgetDiagnostics::from_first_admissible(&firsts, delta, m).unwrap();
            for w in diag.rows.windows(2) {
                prop_assert!(w[1].failures <= w[0].failures);
                prop_assert!(w[1].upper_bound <= w[0].upper_bound);
            }
        }

        #[test]
        fn selection_minimal_and_monotone_in_alpha(
            (m, firsts) in arb_firsts(),
            a1 in 0.01f64..0.99,
            a2 in 0.01f64..0.99,
        ) {
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            let diag = BudgetDiagnostics::from_first_admissible(&firsts, 0.05, m).unwrap();
            let out_lo = diag.select(lo).unwrap();
            let out_hi = diag.select(hi).unwrap();
            // exhaustive scan of every s
            let brute = (1..=m).filter(|&s| diag.rows[s - 1].upper_bound <= lo).min();
            prop_assert_eq!(out_lo.s_hat(), brute);
            if let Some(s) = out_lo.s_hat() {
                prop_assert!(s == 1 || diag.rows[s - 2].upper_bound > lo);
                prop_assert!(out_hi.s_hat().unwrap() <= s);
            }
            if out_hi.is_abstain() {
                prop_assert!(out_lo.is_abstain());
            }
        }
    }
}
