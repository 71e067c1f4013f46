//! Stage II: conformal filtering of the calibrated sampling sets.
//!
//! Among calibration records whose `s_hat`-prefix holds an admissible
//! answer, `u*` is the smallest uncertainty of any admissible candidate in
//! that prefix. Filtering with threshold `t` keeps candidates with
//! uncertainty `<= t`, so a record loses every admissible answer exactly when
//! `u* > t`. The threshold is the smallest `t` with
//! `(#{u* > t} + 1) / (N' + 1) <= beta`; because the loss only drops at the
//! `u*` values this is an order statistic of the sorted `u*`.

use std::fmt;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{check_open_unit, invalid, Error, Result};
use crate::records::{is_admissible, AdmissionCriterion, QuestionRecord};

/// Uncertainty threshold; `Infinite` keeps every candidate.
///
/// Serializes as a JSON number, or as the string `"inf"` when infinite.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub enum Threshold {
    Finite(f64),
    Infinite,
}

impl Threshold {
    pub fn value(self) -> f64 {
        match self {
            Self::Finite(t) => t,
            Self::Infinite => f64::INFINITY,
        }
    }

    pub fn keeps(self, uncertainty: f64) -> bool {
        match self {
            Self::Finite(t) => uncertainty <= t,
            Self::Infinite => true,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Self::Infinite)
    }
}

impl From<f64> for Threshold {
    fn from(t: f64) -> Self {
        if t == f64::INFINITY {
            Self::Infinite
        } else {
            Self::Finite(t)
        }
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Finite(t) => write!(f, "{t}"),
            Self::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Threshold {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Finite(t) => serializer.serialize_f64(*t),
            Self::Infinite => serializer.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct ThresholdVisitor;

        impl Visitor<'_> for ThresholdVisitor {
            type Value = Threshold;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a number or the string \"inf\"")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Threshold, E> {
                Ok(Threshold::from(v))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Threshold, E> {
                Ok(Threshold::Finite(v as f64))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Threshold, E> {
                Ok(Threshold::Finite(v as f64))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Threshold, E> {
                match v {
                    "inf" | "+inf" | "infinity" => Ok(Threshold::Infinite),
                    other => Err(E::invalid_value(de::Unexpected::Str(other), &self)),
                }
            }
        }

        deserializer.deserialize_any(ThresholdVisitor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterCalibration {
    pub t_hat: Threshold,
    pub n_prime: usize,
    /// `(beta (N' + 1) - 1) / N'`, the bound on the calibration-subset loss.
    pub target_level: f64,
    /// Sorted `u*` values.
    pub min_admissible_uncertainties: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub record_id: String,
    pub kept_indices: Vec<usize>,
    pub source_budget: usize,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.kept_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept_indices.is_empty()
    }
}

/// Smallest uncertainty among admissible candidates in the `s_hat`-prefix.
pub fn min_admissible_uncertainty(
    rec: &QuestionRecord,
    s_hat: usize,
    crit: &AdmissionCriterion,
) -> Result<Option<f64>> {
    let flags = rec.admissible_prefix(s_hat, crit)?;
    Ok(rec
        .candidates()
        .iter()
        .zip(flags)
        .filter(|(_, ok)| *ok)
        .map(|(c, _)| c.uncertainty())
        .reduce(f64::min))
}

/// `u*` for every calibration record covered within `s_hat` samples.
pub fn build_calibration_subset(
    records: &[QuestionRecord],
    s_hat: usize,
    crit: &AdmissionCriterion,
) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for rec in records {
        if let Some(u) = min_admissible_uncertainty(rec, s_hat, crit)? {
            out.push(u);
        }
    }
    Ok(out)
}

/// Fraction of covered records whose every admissible answer is filtered
/// out at threshold `t`.
pub fn average_loss(u_stars: &[f64], t: f64) -> Result<f64> {
    if u_stars.is_empty() {
        return Err(Error::NoCoveredRecords);
    }
    let misses = u_stars.iter().filter(|&&u| u > t).count();
    Ok(misses as f64 / u_stars.len() as f64)
}

/// Largest miss count `j` allowed by `(j + 1) / (n + 1) <= beta`, if any.
fn max_misses(n: usize, beta: f64) -> Option<usize> {
    let np1 = (n + 1) as f64;
    let ok = |j: i64| (j + 1) as f64 / np1 <= beta;
    let mut j = (beta * np1).floor() as i64 - 1;
    while j + 1 < n as i64 && ok(j + 1) {
        j += 1;
    }
    while j >= 0 && !ok(j) {
        j -= 1;
    }
    (j >= 0).then_some(j as usize)
}

pub fn calibrate_threshold(u_stars: &[f64], beta: f64) -> Result<FilterCalibration> {
    check_open_unit("beta", beta)?;
    if u_stars.is_empty() {
        return Err(Error::NoCoveredRecords);
    }
    if let Some(bad) = u_stars.iter().find(|u| !(u.is_finite() && **u >= 0.0)) {
        return Err(invalid("u_star", bad, "must be finite and >= 0"));
    }
    let mut sorted = u_stars.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let t_hat = match max_misses(n, beta) {
        // k-th smallest with k = n - j = ceil((n + 1)(1 - beta))
        Some(j) => Threshold::Finite(sorted[n - j - 1]),
        None => Threshold::Infinite,
    };
    Ok(FilterCalibration {
        t_hat,
        n_prime: n,
        target_level: (beta * (n + 1) as f64 - 1.0) / n as f64,
        min_admissible_uncertainties: sorted,
    })
}

/// Candidates of the `s_hat`-prefix with uncertainty at most `t_hat`.
pub fn prediction_set(
    rec: &QuestionRecord,
    s_hat: usize,
    t_hat: Threshold,
) -> Result<PredictionSet> {
    let kept_indices = rec
        .prefix(s_hat)?
        .iter()
        .filter(|c| t_hat.keeps(c.uncertainty()))
        .map(|c| c.index())
        .collect();
    Ok(PredictionSet {
        record_id: rec.id().to_owned(),
        kept_indices,
        source_budget: s_hat,
    })
}

/// Whether a prediction set still holds an admissible answer.
pub fn set_covers(
    rec: &QuestionRecord,
    set: &PredictionSet,
    crit: &AdmissionCriterion,
) -> Result<bool> {
    for &j in &set.kept_indices {
        let c = &rec.candidates()[j - 1];
        if is_admissible(c, crit).map_err(|e| match e {
            Error::ScoreAbsent {
                candidate,
                criterion,
                ..
            } => Error::ScoreAbsent {
                record: rec.id().to_owned(),
                candidate,
                criterion,
            },
            other => other,
        })? {
            return Ok(true);
        }
    }
    Ok(false)
}
