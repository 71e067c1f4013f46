//! Newline-delimited JSON datasets of pre-scored sampled generations.
//!
//! One record per line:
//!
//! ```json
//! {"id": "q1", "question": "...", "reference": "...",
//!  "candidates": [{"index": 1, "text": "...", "uncertainty": 0.42,
//!                  "scores": {"similarity": 0.71, "rouge_l": 0.5}}]}
//! ```
//!
//! `question`, `reference`, `text` and `index` are optional. Candidate array
//! order is sampling order; when `index` is present it must equal the
//! 1-based position. Every candidate in a file must carry the same set of
//! score names. Blank lines are ignored.

mod rouge;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

pub use rouge::{lcs_len, rouge_l, rouge_l_text, tokenize};

use crate::records::{Candidate, QuestionRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IngestError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },

    #[error("line {line}: malformed JSON: {message}")]
    MalformedJson { line: usize, message: String },

    #[error("line {line}: missing required field `{field}`")]
    MissingField { line: usize, field: String },

    #[error("line {line}: field `{field}` {message}")]
    InvalidField {
        line: usize,
        field: String,
        message: String,
    },

    #[error("line {line}: candidate {candidate} score `{name}` = {value} outside [0, 1]")]
    ScoreOutOfRange {
        line: usize,
        candidate: usize,
        name: String,
        value: f64,
    },

    #[error("line {line}: candidate {candidate} has negative uncertainty {value}")]
    NegativeUncertainty {
        line: usize,
        candidate: usize,
        value: f64,
    },

    #[error("line {line}: candidate at position {expected} has index {found}")]
    NonContiguousIndex {
        line: usize,
        expected: usize,
        found: u64,
    },

    #[error("line {line}: candidate list is empty")]
    EmptyCandidates { line: usize },

    #[error("line {line}: score names {found:?} differ from {expected:?}")]
    InconsistentCriteria {
        line: usize,
        expected: Vec<String>,
        found: Vec<String>,
    },

    #[error("line {line}: duplicate record id `{id}`")]
    DuplicateId { line: usize, id: String },

    #[error("dataset contains no records")]
    EmptyDataset,

    #[error("records lack candidate or reference text: {records:?}")]
    MissingText { records: Vec<String> },
}

/// A validated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub path: Option<PathBuf>,
    pub records: Vec<QuestionRecord>,
    pub declared_criteria: BTreeSet<String>,
}

impl DatasetFile {
    pub fn from_records(records: Vec<QuestionRecord>) -> Self {
        let declared_criteria = records
            .first()
            .and_then(|r| r.candidates().first())
            .map(|c| c.relevance_scores().keys().cloned().collect())
            .unwrap_or_default();
        Self {
            path: None,
            records,
            declared_criteria,
        }
    }

    pub fn to_jsonl(&self) -> String {
        serialize_records(&self.records)
    }
}

pub fn parse_dataset(path: impl AsRef<Path>) -> Result<DatasetFile, IngestError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| IngestError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut ds = parse_dataset_str(&text)?;
    ds.path = Some(path.to_path_buf());
    Ok(ds)
}

pub fn parse_dataset_str(text: &str) -> Result<DatasetFile, IngestError> {
    let mut records = Vec::new();
    let mut declared: Option<BTreeSet<String>> = None;
    let mut seen_ids = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(raw).map_err(|e| IngestError::MalformedJson {
            line,
            message: e.to_string(),
        })?;
        let record = parse_record(&value, line)?;
        for c in record.candidates() {
            let names: BTreeSet<String> = c.relevance_scores().keys().cloned().collect();
            match &declared {
                None => declared = Some(names),
                Some(expected) if *expected != names => {
                    return Err(IngestError::InconsistentCriteria {
                        line,
                        expected: expected.iter().cloned().collect(),
                        found: names.into_iter().collect(),
                    })
                }
                Some(_) => {}
            }
        }
        if !seen_ids.insert(record.id().to_owned()) {
            return Err(IngestError::DuplicateId {
                line,
                id: record.id().to_owned(),
            });
        }
        records.push(record);
    }
    if records.is_empty() {
        return Err(IngestError::EmptyDataset);
    }
    Ok(DatasetFile {
        path: None,
        records,
        declared_criteria: declared.unwrap_or_default(),
    })
}

fn field_err(line: usize, field: &str, message: &str) -> IngestError {
    IngestError::InvalidField {
        line,
        field: field.to_owned(),
        message: message.to_owned(),
    }
}

fn optional_string(obj: &Map<String, Value>, key: &str, line: usize) -> Result<Option<String>, IngestError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(field_err(line, key, "must be a string")),
    }
}

fn parse_record(value: &Value, line: usize) -> Result<QuestionRecord, IngestError> {
    let obj = value
        .as_object()
        .ok_or_else(|| field_err(line, "<record>", "must be a JSON object"))?;
    let id = match obj.get("id") {
        None => {
            return Err(IngestError::MissingField {
                line,
                field: "id".into(),
            })
        }
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(field_err(line, "id", "must be a string")),
    };
    let question = optional_string(obj, "question", line)?;
    let reference = optional_string(obj, "reference", line)?;
    let raw_candidates = obj
        .get("candidates")
        .ok_or_else(|| IngestError::MissingField {
            line,
            field: "candidates".into(),
        })?
        .as_array()
        .ok_or_else(|| field_err(line, "candidates", "must be an array"))?;
    if raw_candidates.is_empty() {
        return Err(IngestError::EmptyCandidates { line });
    }
    let candidates = raw_candidates
        .iter()
        .enumerate()
        .map(|(pos, raw)| parse_candidate(raw, pos + 1, line))
        .collect::<Result<Vec<_>, _>>()?;
    QuestionRecord::new(id, question, reference, candidates)
        .map_err(|e| field_err(line, "candidates", &e.to_string()))
}

fn parse_candidate(value: &Value, position: usize, line: usize) -> Result<Candidate, IngestError> {
    let obj = value
        .as_object()
        .ok_or_else(|| field_err(line, "candidates[]", "must be a JSON object"))?;
    if let Some(raw) = obj.get("index") {
        let found = raw
            .as_u64()
            .ok_or_else(|| field_err(line, "index", "must be a positive integer"))?;
        if found != position as u64 {
            return Err(IngestError::NonContiguousIndex {
                line,
                expected: position,
                found,
            });
        }
    }
    let uncertainty = obj
        .get("uncertainty")
        .ok_or_else(|| IngestError::MissingField {
            line,
            field: "uncertainty".into(),
        })?
        .as_f64()
        .ok_or_else(|| field_err(line, "uncertainty", "must be a number"))?;
    if uncertainty < 0.0 {
        return Err(IngestError::NegativeUncertainty {
            line,
            candidate: position,
            value: uncertainty,
        });
    }
    let raw_scores = obj
        .get("scores")
        .ok_or_else(|| IngestError::MissingField {
            line,
            field: "scores".into(),
        })?
        .as_object()
        .ok_or_else(|| field_err(line, "scores", "must be an object"))?;
    let mut scores = BTreeMap::new();
    for (name, raw) in raw_scores {
        let value = raw
            .as_f64()
            .ok_or_else(|| field_err(line, &format!("scores.{name}"), "must be a number"))?;
        if !(0.0..=1.0).contains(&value) {
            return Err(IngestError::ScoreOutOfRange {
                line,
                candidate: position,
                name: name.clone(),
                value,
            });
        }
        scores.insert(name.clone(), value);
    }
    let text = optional_string(obj, "text", line)?;
    Candidate::new(position, uncertainty, scores, text)
        .map_err(|e| field_err(line, "candidates[]", &e.to_string()))
}

#[derive(Serialize)]
struct WireCandidate<'a> {
    index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<&'a str>,
    uncertainty: f64,
    scores: &'a BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct WireRecord<'a> {
    id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    question: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reference: Option<&'a str>,
    candidates: Vec<WireCandidate<'a>>,
}

/// One JSON object per line, each terminated by `\n`.
pub fn serialize_records(records: &[QuestionRecord]) -> String {
    let mut out = String::new();
    for rec in records {
        let wire = WireRecord {
            id: rec.id(),
            question: rec.question(),
            reference: rec.reference(),
            candidates: rec
                .candidates()
                .iter()
                .map(|c| WireCandidate {
                    index: c.index(),
                    text: c.text(),
                    uncertainty: c.uncertainty(),
                    scores: c.relevance_scores(),
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&wire).expect("records serialize to JSON"));
        out.push('\n');
    }
    out
}

/// Adds ROUGE-L F1 against the reference under `criterion_name` to every
/// candidate. Overwrites an existing score of that name, so re-running is a
/// no-op.
pub fn attach_rouge_scores(
    dataset: &DatasetFile,
    criterion_name: &str,
) -> Result<DatasetFile, IngestError> {
    let missing: Vec<String> = dataset
        .records
        .iter()
        .filter(|r| {
            r.reference().map_or(true, |t| tokenize(t).is_empty())
                || r.candidates().iter().any(|c| c.text().is_none())
        })
        .map(|r| r.id().to_owned())
        .collect();
    if !missing.is_empty() {
        return Err(IngestError::MissingText { records: missing });
    }
    let records = dataset
        .records
        .par_iter()
        .map(|rec| {
            let reference = tokenize(rec.reference().unwrap_or_default());
            let candidates = rec
                .candidates()
                .iter()
                .map(|c| {
                    let score = rouge_l(&tokenize(c.text().unwrap_or_default()), &reference)
                        .expect("reference checked nonempty");
                    c.with_score(criterion_name, score)
                        .expect("rouge score lies in [0, 1]")
                })
                .collect();
            rec.with_candidates(candidates)
                .expect("candidate indices unchanged")
        })
        .collect();
    let mut declared_criteria = dataset.declared_criteria.clone();
    declared_criteria.insert(criterion_name.to_owned());
    Ok(DatasetFile {
        path: dataset.path.clone(),
        records,
        declared_criteria,
    })
}
