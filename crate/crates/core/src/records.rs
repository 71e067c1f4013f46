//! Data model shared by every calibration stage: sampled candidates, question
//! records, admission criteria and the risk configuration.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{check_open_unit, invalid, Error, Result};

/// One sampled answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    index: usize,
    uncertainty: f64,
    relevance_scores: BTreeMap<String, f64>,
    text: Option<String>,
}

impl Candidate {
    /// `index` is the 1-based sampling position. Uncertainty is in nats and
    /// unbounded above; every relevance score must lie in `[0, 1]`.
    pub fn new(
        index: usize,
        uncertainty: f64,
        relevance_scores: BTreeMap<String, f64>,
        text: Option<String>,
    ) -> Result<Self> {
        if index == 0 {
            return Err(invalid("index", index, "candidate indices are 1-based"));
        }
        if !(uncertainty.is_finite() && uncertainty >= 0.0) {
            return Err(invalid("uncertainty", uncertainty, "must be finite and >= 0"));
        }
        for value in relevance_scores.values() {
            if !(0.0..=1.0).contains(value) {
                return Err(invalid("relevance score", value, "must lie in [0, 1]"));
            }
        }
        Ok(Self {
            index,
            uncertainty,
            relevance_scores,
            text,
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn uncertainty(&self) -> f64 {
        self.uncertainty
    }

    pub fn relevance_scores(&self) -> &BTreeMap<String, f64> {
        &self.relevance_scores
    }

    pub fn score(&self, name: &str) -> Option<f64> {
        self.relevance_scores.get(name).copied()
    }

    pub fn text(&self) -> Option<&str> {
        self.text.as_deref()
    }

    /// Returns a copy carrying `name = value` in its score map.
    pub fn with_score(&self, name: &str, value: f64) -> Result<Self> {
        let mut scores = self.relevance_scores.clone();
        scores.insert(name.to_owned(), value);
        Self::new(self.index, self.uncertainty, scores, self.text.clone())
    }
}

/// A question with its sampled candidates in sampling order.
///
/// The first `s` candidates form the sampling set of size `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    id: String,
    question: Option<String>,
    reference: Option<String>,
    candidates: Vec<Candidate>,
}

impl QuestionRecord {
    pub fn new(
        id: impl Into<String>,
        question: Option<String>,
        reference: Option<String>,
        candidates: Vec<Candidate>,
    ) -> Result<Self> {
        let id = id.into();
        if candidates.is_empty() {
            return Err(Error::InvalidRecord {
                record: id,
                reason: "candidate list is empty".into(),
            });
        }
        for (pos, c) in candidates.iter().enumerate() {
            if c.index != pos + 1 {
                return Err(Error::InvalidRecord {
                    record: id,
                    reason: format!(
                        "candidate indices must be contiguous from 1: position {} has index {}",
                        pos + 1,
                        c.index
                    ),
                });
            }
        }
        Ok(Self {
            id,
            question,
            reference,
            candidates,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn question(&self) -> Option<&str> {
        self.question.as_deref()
    }

    pub fn reference(&self) -> Option<&str> {
        self.reference.as_deref()
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// The sampling set of size `s`.
    pub fn prefix(&self, s: usize) -> Result<&[Candidate]> {
        if s > self.candidates.len() {
            return Err(Error::InsufficientSamples {
                record: self.id.clone(),
                required: s,
                available: self.candidates.len(),
            });
        }
        Ok(&self.candidates[..s])
    }

    /// Admissibility of each candidate in the `s`-prefix.
    pub fn admissible_prefix(&self, s: usize, crit: &AdmissionCriterion) -> Result<Vec<bool>> {
        self.prefix(s)?
            .iter()
            .map(|c| is_admissible(c, crit).map_err(|e| self.relabel(e)))
            .collect()
    }

    /// 1-based index of the first admissible candidate within the `s`-prefix.
    pub fn first_admissible(&self, s: usize, crit: &AdmissionCriterion) -> Result<Option<usize>> {
        for c in self.prefix(s)? {
            if is_admissible(c, crit).map_err(|e| self.relabel(e))? {
                return Ok(Some(c.index));
            }
        }
        Ok(None)
    }

    /// Whether the `s`-prefix contains at least one admissible candidate.
    pub fn covered(&self, s: usize, crit: &AdmissionCriterion) -> Result<bool> {
        Ok(self.first_admissible(s, crit)?.is_some())
    }

    pub fn with_candidates(&self, candidates: Vec<Candidate>) -> Result<Self> {
        Self::new(
            self.id.clone(),
            self.question.clone(),
            self.reference.clone(),
            candidates,
        )
    }

    fn relabel(&self, e: Error) -> Error {
        match e {
            Error::ScoreAbsent {
                candidate,
                criterion,
                ..
            } => Error::ScoreAbsent {
                record: self.id.clone(),
                candidate,
                criterion,
            },
            other => other,
        }
    }
}

/// Named relevance score plus the threshold that makes a candidate admissible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissionCriterion {
    name: String,
    lambda_a: f64,
}

impl AdmissionCriterion {
    pub fn new(name: impl Into<String>, lambda_a: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda_a) {
            return Err(invalid("lambda_a", lambda_a, "must lie in [0, 1]"));
        }
        Ok(Self {
            name: name.into(),
            lambda_a,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn lambda_a(&self) -> f64 {
        self.lambda_a
    }
}

/// `score >= lambda_a`, the weak inequality.
pub fn is_admissible(c: &Candidate, crit: &AdmissionCriterion) -> Result<bool> {
    match c.score(&crit.name) {
        Some(score) => Ok(score >= crit.lambda_a),
        None => Err(Error::ScoreAbsent {
            record: "?".into(),
            candidate: c.index,
            criterion: crit.name.clone(),
        }),
    }
}

/// Risk levels and sampling settings for one calibration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskConfig {
    /// Stage-1 risk level.
    pub alpha: f64,
    /// Stage-2 risk level.
    pub beta: f64,
    /// Significance level of the stage-1 bound.
    pub delta: f64,
    /// Sampling cap `M`.
    pub max_samples: usize,
    pub split_ratio: f64,
    pub seed: u64,
}

impl Default for RiskConfig {
    fn default() -> Self {
        Self {
            alpha: 0.10,
            beta: 0.10,
            delta: 0.05,
            max_samples: 20,
            split_ratio: 0.5,
            seed: 0,
        }
    }
}

impl RiskConfig {
    pub fn validate(&self) -> Result<()> {
        check_open_unit("alpha", self.alpha)?;
        check_open_unit("beta", self.beta)?;
        check_open_unit("delta", self.delta)?;
        check_open_unit("split_ratio", self.split_ratio)?;
        if self.max_samples == 0 {
            return Err(invalid("max_samples", 0, "must be at least 1"));
        }
        Ok(())
    }
}

/// SplitMix64: `state += 0x9E3779B97F4A7C15`, then the output is `state`
/// passed through two xor-shift-multiply rounds
/// (`0xBF58476D1CE4E5B9` after `>> 30`, `0x94D049BB133111EB` after `>> 27`)
/// and a final `^ (z >> 31)`. Pure 64-bit integer arithmetic, so every
/// platform produces the same stream for a given seed.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform integer in `[0, bound)` by rejection of the biased low zone.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "bound must be positive");
        let reject_below = bound.wrapping_neg() % bound;
        loop {
            let x = self.next_u64();
            if x >= reject_below {
                return x % bound;
            }
        }
    }
}

/// Mixes a base seed with a stream index into an independent sub-seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut mixer = SplitMix64::new(seed ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    mixer.next_u64()
}

/// Seeded Fisher–Yates shuffle followed by a prefix split.
///
/// The calibration part holds `round(ratio * n)` records.
pub fn split_calibration_test<T: Clone>(
    records: &[T],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    check_open_unit("split_ratio", ratio)?;
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = SplitMix64::new(seed);
    for i in (1..order.len()).rev() {
        let j = rng.next_below(i as u64 + 1) as usize;
        order.swap(i, j);
    }
    let n_cal = (ratio * records.len() as f64).round() as usize;
    let cal = order[..n_cal].iter().map(|&i| records[i].clone()).collect();
    let test = order[n_cal..].iter().map(|&i| records[i].clone()).collect();
    Ok((cal, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cand(index: usize, score: f64) -> Candidate {
        let scores = BTreeMap::from([("sim".to_string(), score)]);
        Candidate::new(index, 1.0, scores, None).unwrap()
    }

    #[test]
    fn admissibility_uses_weak_inequality() {
        let crit = AdmissionCriterion::new("sim", 0.6).unwrap();
        assert!(is_admissible(&cand(1, 0.72), &crit).unwrap());
        assert!(is_admissible(&cand(1, 0.6), &crit).unwrap());
        assert!(!is_admissible(&cand(1, 0.59), &crit).unwrap());
    }

    #[test]
    fn missing_score_names_record_and_candidate() {
        let rec = QuestionRecord::new("q7", None, None, vec![cand(1, 0.9), cand(2, 0.1)]).unwrap();
        let crit = AdmissionCriterion::new("rouge_l", 0.3).unwrap();
        let err = rec.first_admissible(2, &crit).unwrap_err();
        assert_eq!(
            err,
            Error::ScoreAbsent {
                record: "q7".into(),
                candidate: 1,
                criterion: "rouge_l".into()
            }
        );
    }

    #[test]
    fn candidate_invariants_are_enforced() {
        assert!(Candidate::new(1, -0.1, BTreeMap::new(), None).is_err());
        assert!(Candidate::new(1, f64::NAN, BTreeMap::new(), None).is_err());
        assert!(Candidate::new(0, 0.1, BTreeMap::new(), None).is_err());
        let bad = BTreeMap::from([("sim".to_string(), 1.2)]);
        assert!(Candidate::new(1, 0.1, bad, None).is_err());
        // uncertainty is not capped at 1
        assert!(Candidate::new(1, 17.5, BTreeMap::new(), None).is_ok());
    }

    #[test]
    fn record_requires_contiguous_nonempty_candidates() {
        assert!(QuestionRecord::new("a", None, None, vec![]).is_err());
        assert!(QuestionRecord::new("a", None, None, vec![cand(1, 0.1), cand(3, 0.1)]).is_err());
        assert!(QuestionRecord::new("a", None, None, vec![cand(2, 0.1)]).is_err());
    }

    #[test]
    fn prefix_checks_length() {
        let rec = QuestionRecord::new("a", None, None, vec![cand(1, 0.1), cand(2, 0.7)]).unwrap();
        let crit = AdmissionCriterion::new("sim", 0.6).unwrap();
        assert_eq!(rec.first_admissible(2, &crit).unwrap(), Some(2));
        assert_eq!(rec.first_admissible(1, &crit).unwrap(), None);
        assert!(matches!(
            rec.first_admissible(3, &crit),
            Err(Error::InsufficientSamples { required: 3, available: 2, .. })
        ));
    }

    #[test]
    fn risk_config_validation() {
        assert!(RiskConfig::default().validate().is_ok());
        let cfg = RiskConfig {
            alpha: 1.0,
            ..RiskConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = RiskConfig {
            max_samples: 0,
            ..RiskConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn split_cardinalities() {
        let items: Vec<u32> = (0..10).collect();
        let (cal, test) = split_calibration_test(&items, 0.5, 7).unwrap();
        assert_eq!((cal.len(), test.len()), (5, 5));
        let items: Vec<u32> = (0..2000).collect();
        let (cal, test) = split_calibration_test(&items, 0.1, 7).unwrap();
        assert_eq!((cal.len(), test.len()), (200, 1800));
        assert!(split_calibration_test::<u32>(&[], 0.5, 1).is_err());
        assert!(split_calibration_test(&items, 1.0, 1).is_err());
    }

    #[test]
    fn splitmix_reference_stream() {
        // First outputs of SplitMix64 seeded with 0, as published with the
        // reference C implementation.
        let mut rng = SplitMix64::new(0);
        assert_eq!(rng.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(rng.next_u64(), 0x6E78_9E6A_A1B9_65F4);
    }

    proptest! {
        #[test]
        fn split_is_deterministic_partition(n in 1usize..300, ratio in 0.01f64..0.99, seed: u64) {
            let items: Vec<usize> = (0..n).collect();
            let (cal, test) = split_calibration_test(&items, ratio, seed).unwrap();
            let (cal2, test2) = split_calibration_test(&items, ratio, seed).unwrap();
            prop_assert_eq!(&cal, &cal2);
            prop_assert_eq!(&test, &test2);
            let mut all: Vec<usize> = cal.iter().chain(test.iter()).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, items);
            prop_assert_eq!(cal.len(), (ratio * n as f64).round() as usize);
        }

        #[test]
        fn admissibility_monotone_in_score(lo in 0.0f64..=1.0, hi in 0.0f64..=1.0, lambda in 0.0f64..=1.0) {
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            let crit = AdmissionCriterion::new("sim", lambda).unwrap();
            if is_admissible(&cand(1, lo), &crit).unwrap() {
                prop_assert!(is_admissible(&cand(1, hi), &crit).unwrap());
            }
        }
    }
}
