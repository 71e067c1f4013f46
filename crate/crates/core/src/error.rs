use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}` = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: String,
        reason: &'static str,
    },

    #[error("score `{criterion}` absent for record `{record}` candidate {candidate}")]
    ScoreAbsent {
        record: String,
        candidate: usize,
        criterion: String,
    },

    #[error("record `{record}` has {available} candidates but {required} are required")]
    InsufficientSamples {
        record: String,
        required: usize,
        available: usize,
    },

    #[error("record `{record}` is invalid: {reason}")]
    InvalidRecord { record: String, reason: String },

    #[error("no records supplied")]
    EmptyInput,

    #[error("no covered calibration records: threshold calibration needs at least one")]
    NoCoveredRecords,

    #[error("empty reference token sequence")]
    EmptyReference,

    #[error("calibration abstained; no prediction sets can be formed")]
    Abstained,

    #[error(transparent)]
    Ingest(#[from] crate::ingest::IngestError),

    #[error("invalid simulation spec: {0}")]
    SimSpec(String),
}

pub(crate) fn invalid(name: &'static str, value: impl ToString, reason: &'static str) -> Error {
    Error::InvalidParameter {
        name,
        value: value.to_string(),
        reason,
    }
}

/// Checks `0 < p < 1` for a named probability.
pub(crate) fn check_open_unit(name: &'static str, p: f64) -> Result<f64> {
    if p.is_finite() && p > 0.0 && p < 1.0 {
        Ok(p)
    } else {
        Err(invalid(name, p, "must lie strictly inside (0, 1)"))
    }
}
