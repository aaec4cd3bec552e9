use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use retgrade_core::model::{GraderRole, SeverityGrade};
use retgrade_core::operating::ScoreMode;
use retgrade_core::refstd::TieRule;
use retgrade_core::report::ReportFormat;

#[derive(Debug, Parser)]
#[command(name = "retgrade", version, about = "Reference standards, agreement metrics and operating points for retinal grading studies")]
pub struct Cli {
    /// Seed for bootstrap resampling and synthetic data.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Bootstrap resamples for confidence intervals (at least 100).
    #[arg(long = "bootstrap-n", global = true, default_value_t = 2000)]
    pub bootstrap_n: usize,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Base directory for relative file paths.
    #[arg(long = "data-dir", global = true, env = "RETGRADE_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
    Csv,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Text => ReportFormat::Text,
            Format::Json => ReportFormat::Json,
            Format::Csv => ReportFormat::Csv,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a grade log and summarize it; optionally rewrite it.
    Ingest {
        #[command(flatten)]
        grades: GradeInput,
        /// Write the validated events as a normalized grade log.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reference-standard construction.
    Refstd {
        #[command(subcommand)]
        command: RefstdCommand,
    },
    /// Images with open disagreements, oldest first.
    Queue {
        #[command(flatten)]
        grades: GradeInput,
        #[command(flatten)]
        panel: PanelArgs,
    },
    /// Sensitivity, specificity and kappa of a test label set against a reference.
    Metrics {
        #[command(flatten)]
        source: ComparisonSource,
        #[arg(long, default_value = "moderate", value_parser = parse_grade)]
        cutoff: SeverityGrade,
        /// Add bootstrap confidence intervals.
        #[arg(long)]
        ci: bool,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
    },
    /// Quadratic-weighted kappa on the DR grades.
    Kappa {
        #[command(flatten)]
        source: ComparisonSource,
        #[arg(long)]
        ci: bool,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
    },
    /// ROC curve and AUC of model scores against a reference.
    Roc {
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Prediction files; several are averaged as an ensemble.
        #[arg(long = "predictions", required = true, num_args = 1..)]
        predictions: Vec<PathBuf>,
        /// Positive class: DR at or above this grade.
        #[arg(long, default_value = "moderate", value_parser = parse_grade)]
        cutoff: SeverityGrade,
        /// Score referable DME instead of DR.
        #[arg(long)]
        dme: bool,
        #[arg(long)]
        ci: bool,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
    },
    /// Cascade operating points.
    Cascade {
        #[command(subcommand)]
        command: CascadeCommand,
    },
    /// Average member prediction files into one ensemble file.
    Ensemble {
        #[arg(long = "predictions", required = true, num_args = 1..)]
        predictions: Vec<PathBuf>,
        #[arg(long, default_value = "ensemble")]
        id: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Confusion matrices, step analysis and metrics of one comparison.
    Compare {
        #[command(flatten)]
        source: ComparisonSource,
        #[arg(long, default_value = "moderate", value_parser = parse_grade)]
        cutoff: SeverityGrade,
        #[arg(long = "ref-label", default_value = "Reference")]
        ref_label: String,
        #[arg(long = "test-label", default_value = "Test")]
        test_label: String,
        /// Disagreement reasons to cross-tabulate by step.
        #[arg(long)]
        reasons: Option<PathBuf>,
    },
    /// Dataset characteristics and severity distribution.
    Summary {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value = "Dataset")]
        name: String,
    },
    /// Every table and plot series of a study directory.
    Report {
        /// Directory with manifest.jsonl, grades.jsonl, predictions/, policy.json and reasons.jsonl.
        #[arg(long)]
        dir: PathBuf,
        /// Recorded matrices to include verbatim.
        #[arg(long)]
        tables: Option<PathBuf>,
        #[arg(long, default_value = "moderate", value_parser = parse_grade)]
        cutoff: SeverityGrade,
        /// Add bootstrap intervals to the AUC table.
        #[arg(long)]
        ci: bool,
    },
    /// Run the adjudication HTTP service.
    Serve {
        /// Directory holding one sub-directory per dataset.
        #[arg(long)]
        store: PathBuf,
        /// JSON list of bearer tokens.
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long = "snapshot-every", default_value_t = 100)]
        snapshot_every: u64,
        /// Let admin tokens enter adjudication endorsements for graders.
        #[arg(long = "allow-facilitator")]
        allow_facilitator: bool,
    },
    /// Generate synthetic study data.
    Synth {
        #[command(subcommand)]
        command: SynthCommand,
    },
}

#[derive(Debug, Subcommand)]
pub enum RefstdCommand {
    /// Build a reference standard from a grade log.
    Build {
        #[command(flatten)]
        grades: GradeInput,
        #[command(flatten)]
        panel: PanelArgs,
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long = "tie-rule", value_enum, default_value_t = TieArg::OrdinalMedian)]
        tie_rule: TieArg,
        /// Majority only: independent grades each image needs.
        #[arg(long = "min-graders", default_value_t = 3)]
        min_graders: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum CascadeCommand {
    /// Fit per-grade thresholds to target sensitivities on a tune set.
    Fit {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long = "predictions", required = true, num_args = 1..)]
        predictions: Vec<PathBuf>,
        /// LEVEL=SENSITIVITY, e.g. moderate=0.9; repeat per level.
        #[arg(long = "target", value_parser = parse_target)]
        targets: Vec<(SeverityGrade, f64)>,
        /// Target sensitivity for referable DME.
        #[arg(long = "dme-target")]
        dme_target: Option<f64>,
        #[arg(long = "score-mode", value_enum, default_value_t = ModeArg::Tail)]
        score_mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grade images with a fitted policy.
    Apply {
        #[arg(long)]
        policy: PathBuf,
        /// Member files named by the policy's ensemble, or one prediction file.
        #[arg(long = "predictions", required = true, num_args = 1..)]
        predictions: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// Grade log of a synthetic independent-grading and adjudication run.
    Workflow {
        #[arg(long, default_value_t = 500)]
        images: usize,
        #[arg(long, default_value_t = 3)]
        graders: usize,
        #[arg(long = "disagreement-rate", default_value_t = 0.2)]
        disagreement_rate: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Study files that reproduce recorded matrices and a study design.
    Validation {
        #[arg(long)]
        tables: PathBuf,
        #[arg(long)]
        study: PathBuf,
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct GradeInput {
    #[arg(long)]
    pub grades: PathBuf,
    /// Manifest linking images to eyes and patients.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Copy eye-level grades to every image of the eye.
    #[arg(long = "replicate-eye-level")]
    pub replicate_eye_level: bool,
}

#[derive(Debug, Clone, Args)]
pub struct PanelArgs {
    /// Graders of these roles form the panel (default: retina_specialist).
    #[arg(long = "role", value_parser = parse_role)]
    pub roles: Vec<GraderRole>,
    /// Explicit panel grader ids; overrides --role.
    #[arg(long = "grader")]
    pub graders: Vec<String>,
}

/// Either two label files or recorded matrices.
#[derive(Debug, Clone, Args)]
pub struct ComparisonSource {
    /// Reference label file (rows).
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// Test label file (columns).
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Recorded matrices file.
    #[arg(long)]
    pub tables: Option<PathBuf>,
    /// Matrix ids from --tables: one 5-class DR and/or one 2-class DME matrix.
    #[arg(long = "id")]
    pub ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Majority,
    Adjudicated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TieArg {
    OrdinalMedian,
    MostSevere,
    LeastSevere,
}

impl From<TieArg> for TieRule {
    fn from(t: TieArg) -> Self {
        match t {
            TieArg::OrdinalMedian => TieRule::OrdinalMedian,
            TieArg::MostSevere => TieRule::MostSevere,
            TieArg::LeastSevere => TieRule::LeastSevere,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Tail,
    SingleClass,
}

impl From<ModeArg> for ScoreMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Tail => ScoreMode::Tail,
            ModeArg::SingleClass => ScoreMode::SingleClass,
        }
    }
}

fn parse_grade(s: &str) -> Result<SeverityGrade, String> {
    s.parse().map_err(|e: retgrade_core::model::ModelError| e.to_string())
}

fn parse_role(s: &str) -> Result<GraderRole, String> {
    s.parse().map_err(|e: retgrade_core::model::ModelError| e.to_string())
}

fn parse_target(s: &str) -> Result<(SeverityGrade, f64), String> {
    let (level, value) = s.split_once('=').ok_or("expected LEVEL=SENSITIVITY")?;
    let value: f64 = value.trim().parse().map_err(|e| format!("sensitivity {value:?}: {e}"))?;
    Ok((parse_grade(level)?, value))
}
