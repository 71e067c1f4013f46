//! `riskctl`: calibrate, apply, evaluate, sweep and simulate two-stage risk
//! control from the command line.
//!
//! Exit codes: 0 success, 3 abstention (calibration produced no budget, or an
//! abstained artifact was given to `apply`/`evaluate`), 4 validation failure,
//! 5 I/O failure.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use riskctl_core::ingest::{attach_rouge_scores, serialize_records};
use riskctl_core::pipeline::apply;
use riskctl_core::simulate::SimSpec;
use riskctl_core::sweep::{run_sweep, sweep_csv, SweepConfig};
use riskctl_core::{
    calibrate, evaluate, parse_dataset, split_calibration_test, validate_guarantees, AdmissionCriterion,
    CalibrationArtifact, Error, EvaluationReport, IngestError, QuestionRecord, RiskConfig,
};

const EXIT_ABSTAIN: u8 = 3;
const EXIT_VALIDATION: u8 = 4;
const EXIT_IO: u8 = 5;

#[derive(Parser)]
#[command(name = "riskctl", version, about = "Two-stage risk control for sampled QA answers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate the sampling budget and uncertainty threshold
    Calibrate(CalibrateArgs),
    /// Filter records with a calibrated artifact, one JSON line per record
    Apply(ApplyArgs),
    /// Compute test-time error rates for an artifact
    Evaluate(EvaluateArgs),
    /// Repeat calibration over grids of risk levels and split ratios
    Sweep(SweepArgs),
    /// Check the guarantees on synthetic populations
    Simulate(SimulateArgs),
    /// Split a dataset into calibration and test files
    Split(SplitArgs),
    /// Add a ROUGE-L score against each record's reference
    ScoreRouge(ScoreRougeArgs),
}

#[derive(Args)]
struct CriterionArgs {
    /// Score name deciding admissibility
    #[arg(long, default_value = "similarity")]
    criterion: String,
    /// Admissibility threshold on the score
    #[arg(long = "lambda", default_value_t = 0.6)]
    lambda_a: f64,
}

impl CriterionArgs {
    fn build(&self) -> Result<AdmissionCriterion> {
        Ok(AdmissionCriterion::new(self.criterion.clone(), self.lambda_a)?)
    }
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    #[arg(long, default_value_t = 20)]
    max_samples: usize,
    #[command(flatten)]
    criterion: CriterionArgs,
    /// Calibrate on this fraction of a seeded split instead of the whole file
    #[arg(long)]
    split_ratio: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Artifact path; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ApplyArgs {
    #[arg(long)]
    artifact: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    artifact: PathBuf,
    #[arg(long)]
    test_data: PathBuf,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.1")]
    alpha_grid: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.15,0.2,0.25,0.3,0.35,0.4")]
    beta_grid: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    ratio_grid: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    #[arg(long, default_value_t = 20)]
    max_samples: usize,
    #[command(flatten)]
    criterion: CriterionArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// TOML spec; keys not given take their defaults
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Overrides the spec seed
    #[arg(long)]
    seed: Option<u64>,
    /// JSON report path; the per-trial table goes next to it with a .csv extension
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    split_ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    cal_out: PathBuf,
    #[arg(long)]
    test_out: PathBuf,
}

#[derive(Args)]
struct ScoreRougeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "rouge_l")]
    name: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<io::Error>() {
            return EXIT_IO;
        }
        if let Some(e) = cause.downcast_ref::<IngestError>() {
            return ingest_code(e);
        }
        match cause.downcast_ref::<Error>() {
            Some(Error::Abstained) => return EXIT_ABSTAIN,
            Some(Error::Ingest(e)) => return ingest_code(e),
            Some(_) => return EXIT_VALIDATION,
            None => {}
        }
    }
    EXIT_VALIDATION
}

fn ingest_code(e: &IngestError) -> u8 {
    match e {
        IngestError::Io { .. } => EXIT_IO,
        _ => EXIT_VALIDATION,
    }
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Apply(a) => cmd_apply(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Split(a) => cmd_split(a),
        Command::ScoreRouge(a) => cmd_score_rouge(a),
    }
}

fn load(path: &Path) -> Result<Vec<QuestionRecord>> {
    Ok(parse_dataset(path)?.records)
}

fn load_artifact(path: &Path) -> Result<CalibrationArtifact> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let artifact: CalibrationArtifact =
        serde_json::from_str(&text).with_context(|| format!("parsing artifact {}", path.display()))?;
    Ok(artifact)
}

/// Writes through a temporary file in the target directory, then renames.
fn emit(out: Option<&Path>, content: &str) -> Result<()> {
    let Some(path) = out else {
        io::stdout().write_all(content.as_bytes())?;
        return Ok(());
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("writing {}", path.display()))?;
    tmp.write_all(content.as_bytes())?;
    tmp.persist(path)
        .map_err(|e| e.error)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<u8> {
    let records = load(&a.data)?;
    let crit = a.criterion.build()?;
    let cfg = RiskConfig {
        alpha: a.alpha,
        beta: a.beta,
        delta: a.delta,
        max_samples: a.max_samples,
        split_ratio: a.split_ratio.unwrap_or(RiskConfig::default().split_ratio),
        seed: a.seed,
    };
    let artifact = match a.split_ratio {
        Some(ratio) => {
            let (cal, _) = split_calibration_test(&records, ratio, a.seed)?;
            calibrate(&cal, &crit, &cfg, Some(a.seed))?
        }
        None => calibrate(&records, &crit, &cfg, None)?,
    };
    emit(a.out.as_deref(), &to_json(&artifact)?)?;
    if artifact.abstain {
        eprintln!(
            "abstained: upper bound at M = {} is {:.6}, above alpha = {}",
            artifact.max_samples, artifact.stage1_bound, artifact.alpha
        );
        return Ok(EXIT_ABSTAIN);
    }
    Ok(0)
}

fn cmd_apply(a: ApplyArgs) -> Result<u8> {
    let artifact = load_artifact(&a.artifact)?;
    let records = load(&a.data)?;
    let sets = apply(&artifact, &records)?;
    let mut out = String::new();
    for (rec, set) in records.iter().zip(&sets) {
        let mut line = json!({
            "id": set.record_id,
            "kept": set.kept_indices,
            "empty": set.is_empty(),
            "s_hat": set.source_budget,
        });
        let texts: Option<Vec<&str>> = set
            .kept_indices
            .iter()
            .map(|&i| rec.candidates()[i - 1].text())
            .collect();
        if let Some(texts) = texts {
            line["texts"] = json!(texts);
        }
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    emit(a.out.as_deref(), &out)?;
    Ok(0)
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<u8> {
    let artifact = load_artifact(&a.artifact)?;
    let records = load(&a.test_data)?;
    let report = evaluate(&artifact, &records)?;
    let text = match a.format {
        Format::Json => to_json(&report)?,
        Format::Csv => format!("{}\n{}\n", EvaluationReport::CSV_HEADER, report.csv_row()),
    };
    emit(a.out.as_deref(), &text)?;
    Ok(0)
}

fn cmd_sweep(a: SweepArgs) -> Result<u8> {
    let records = load(&a.data)?;
    let crit = a.criterion.build()?;
    let cfg = SweepConfig {
        alpha_grid: a.alpha_grid,
        beta_grid: a.beta_grid,
        ratio_grid: a.ratio_grid,
        repeats: a.repeats,
        delta: a.delta,
        max_samples: a.max_samples,
        seed: a.seed,
    };
    let rows = run_sweep(&records, &crit, &cfg)?;
    let text = match a.format {
        Format::Csv => sweep_csv(&rows),
        Format::Json => to_json(&json!({ "config": cfg, "rows": rows }))?,
    };
    emit(a.out.as_deref(), &text)?;
    Ok(0)
}

fn cmd_simulate(a: SimulateArgs) -> Result<u8> {
    let mut spec = match &a.spec {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            SimSpec::from_toml_str(&text)?
        }
        None => SimSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let report = validate_guarantees(&spec)?;
    emit(a.out.as_deref(), &to_json(&report)?)?;
    if let Some(path) = &a.out {
        emit(Some(&path.with_extension("csv")), &report.trials_csv())?;
    }
    Ok(0)
}

fn cmd_split(a: SplitArgs) -> Result<u8> {
    let records = load(&a.data)?;
    let (cal, test) = split_calibration_test(&records, a.split_ratio, a.seed)?;
    emit(Some(&a.cal_out), &serialize_records(&cal))?;
    emit(Some(&a.test_out), &serialize_records(&test))?;
    Ok(0)
}

fn cmd_score_rouge(a: ScoreRougeArgs) -> Result<u8> {
    let dataset = parse_dataset(&a.data)?;
    let scored = attach_rouge_scores(&dataset, &a.name)?;
    emit(a.out.as_deref(), &serialize_records(&scored.records))?;
    Ok(0)
}
