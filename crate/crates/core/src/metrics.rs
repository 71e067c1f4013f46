//! Test-time empirical error rates (EER) and set-size statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::filter::{prediction_set, set_covers, PredictionSet, Threshold};
use crate::records::{AdmissionCriterion, QuestionRecord};

/// Flat summary of one evaluation on held-out records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n_test: usize,
    pub stage1_eer: f64,
    pub stage2_eer_overall: f64,
    /// Miscoverage among records covered by the sampling stage; absent when
    /// no test record was covered.
    pub stage2_eer_conditional: Option<f64>,
    pub n_conditional: usize,
    pub avg_budget: f64,
    pub avg_set_size: f64,
    pub empty_set_rate: f64,
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub combined_bound: f64,
}

impl EvaluationReport {
    pub const CSV_HEADER: &'static str = "n_test,stage1_eer,stage2_eer_overall,stage2_eer_conditional,n_conditional,avg_budget,avg_set_size,empty_set_rate,alpha,beta,delta,combined_bound";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.n_test,
            self.stage1_eer,
            self.stage2_eer_overall,
            self.stage2_eer_conditional.map(|v| v.to_string()).unwrap_or_default(),
            self.n_conditional,
            self.avg_budget,
            self.avg_set_size,
            self.empty_set_rate,
            self.alpha,
            self.beta,
            self.delta,
            self.combined_bound
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2Eer {
    pub overall: f64,
    pub conditional: Option<f64>,
    pub n_conditional: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetSizeStats {
    pub mean: f64,
    pub histogram: BTreeMap<usize, usize>,
}

/// Fraction of records whose `s_hat`-prefix has no admissible candidate.
pub fn stage1_eer(
    test_records: &[QuestionRecord],
    s_hat: usize,
    crit: &AdmissionCriterion,
) -> Result<f64> {
    if test_records.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut misses = 0usize;
    for rec in test_records {
        if !rec.covered(s_hat, crit)? {
            misses += 1;
        }
    }
    Ok(misses as f64 / test_records.len() as f64)
}

pub fn stage2_eer(
    test_records: &[QuestionRecord],
    s_hat: usize,
    t_hat: Threshold,
    crit: &AdmissionCriterion,
) -> Result<Stage2Eer> {
    if test_records.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut misses = 0usize;
    let mut covered = 0usize;
    let mut covered_misses = 0usize;
    for rec in test_records {
        let stage1_ok = rec.covered(s_hat, crit)?;
        let set = prediction_set(rec, s_hat, t_hat)?;
        let ok = stage1_ok && set_covers(rec, &set, crit)?;
        if !ok {
            misses += 1;
        }
        if stage1_ok {
            covered += 1;
            if !ok {
                covered_misses += 1;
            }
        }
    }
    Ok(Stage2Eer {
        overall: misses as f64 / test_records.len() as f64,
        conditional: (covered > 0).then(|| covered_misses as f64 / covered as f64),
        n_conditional: covered,
    })
}

/// `alpha + beta - alpha * beta`.
pub fn combined_bound(alpha: f64, beta: f64) -> Result<f64> {
    for (name, v) in [("alpha", alpha), ("beta", beta)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(invalid(name, v, "must lie in [0, 1]"));
        }
    }
    Ok(alpha + beta - alpha * beta)
}

pub fn set_size_stats(sets: &[PredictionSet]) -> Result<SetSizeStats> {
    if sets.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut histogram = BTreeMap::new();
    let mut total = 0usize;
    for set in sets {
        *histogram.entry(set.len()).or_insert(0) += 1;
        total += set.len();
    }
    Ok(SetSizeStats {
        mean: total as f64 / sets.len() as f64,
        histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::budget::test_support::{record_with, records};
    use proptest::prelude::*;

    fn crit() -> AdmissionCriterion {
        AdmissionCriterion::new("sim", 0.5).unwrap()
    }

    fn set(n: usize) -> PredictionSet {
        PredictionSet {
            record_id: "x".into(),
            kept_indices: (1..=n).collect(),
            source_budget: 5,
        }
    }

    #[test]
    fn stage1_examples() {
        assert_eq!(stage1_eer(&records(3, &[Some(1); 4]), 2, &crit()).unwrap(), 0.0);
        assert_eq!(stage1_eer(&records(3, &[None; 4]), 3, &crit()).unwrap(), 1.0);
        let mut firsts = vec![Some(1); 5];
        firsts.extend([None, Some(3), None]);
        assert_eq!(stage1_eer(&records(3, &firsts), 2, &crit()).unwrap(), 0.375);
        assert!(stage1_eer(&[], 1, &crit()).is_err());
    }

    #[test]
    fn stage2_examples() {
        let recs = records(3, &[Some(1), Some(2), None, Some(3)]);
        let open = stage2_eer(&recs, 3, Threshold::Infinite, &crit()).unwrap();
        assert_eq!(open.overall, stage1_eer(&recs, 3, &crit()).unwrap());
        assert_eq!(open.conditional, Some(0.0));
        let closed = stage2_eer(&recs, 3, Threshold::Finite(0.0), &crit()).unwrap();
        assert_eq!(closed.overall, 1.0);

        let recs = vec![
            record_with("a", 2, Some(1), &[1.0, 5.0]),
            record_with("b", 2, Some(1), &[2.0, 5.0]),
            record_with("c", 2, Some(2), &[0.5, 3.0]),
        ];
        let got = stage2_eer(&recs, 2, Threshold::Finite(2.0), &crit()).unwrap();
        assert!((got.conditional.unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(got.n_conditional, 3);
    }

    #[test]
    fn conditional_absent_without_coverage() {
        let recs = records(2, &[None, None]);
        let got = stage2_eer(&recs, 2, Threshold::Infinite, &crit()).unwrap();
        assert_eq!(got.conditional, None);
        assert_eq!(got.n_conditional, 0);
        assert_eq!(got.overall, 1.0);
    }

    #[test]
    fn combined_bound_table_values() {
        assert!((combined_bound(0.05, 0.10).unwrap() - 0.1450).abs() < 1e-12);
        assert!((combined_bound(0.25, 0.20).unwrap() - 0.4000).abs() < 1e-12);
        assert!((combined_bound(0.05, 0.05).unwrap() - 0.0975).abs() < 1e-12);
        assert_eq!(combined_bound(0.3, 0.0).unwrap(), 0.3);
        assert!(combined_bound(1.5, 0.1).is_err());
    }

    #[test]
    fn set_size_examples() {
        assert_eq!(set_size_stats(&[set(3), set(3)]).unwrap().mean, 3.0);
        let st = set_size_stats(&[set(0), set(2)]).unwrap();
        assert_eq!(st.mean, 1.0);
        assert_eq!(st.histogram, BTreeMap::from([(0, 1), (2, 1)]));
        assert!(set_size_stats(&[]).is_err());
        let recs = records(4, &[Some(1), None, Some(2)]);
        let sets: Vec<_> = recs
            .iter()
            .map(|r| prediction_set(r, 3, Threshold::Infinite).unwrap())
            .collect();
        assert_eq!(set_size_stats(&sets).unwrap().mean, 3.0);
    }

    proptest! {
        #[test]
        fn total_probability_identity(
            rows in prop::collection::vec(
                (prop::option::of(1usize..5), prop::collection::vec(0.0f64..3.0, 4)),
                1..40,
            ),
            t in 0.0f64..3.0,
            s_hat in 1usize..=4,
        ) {
            let recs: Vec<_> = rows
                .iter()
                .enumerate()
                .map(|(i, (f, u))| record_with(&format!("r{i}"), 4, *f, u))
                .collect();
            let s1 = stage1_eer(&recs, s_hat, &crit()).unwrap();
            let s2 = stage2_eer(&recs, s_hat, Threshold::Finite(t), &crit()).unwrap();
            prop_assert!(s2.overall >= s1);
            let covered_frac = s2.n_conditional as f64 / recs.len() as f64;
            let rebuilt = s2.conditional.unwrap_or(0.0) * covered_frac + s1;
            prop_assert!((rebuilt - s2.overall).abs() < 1e-12);

            let mut rev = recs.clone();
            rev.reverse();
            let s2_rev = stage2_eer(&rev, s_hat, Threshold::Finite(t), &crit()).unwrap();
            prop_assert_eq!(s2.overall, s2_rev.overall);
        }
    }
}
