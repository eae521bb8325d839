//! Command-line grammar.

use std::net::SocketAddr;
use std::path::PathBuf;

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::parse_time;

#[derive(Debug, Parser)]
#[command(name = "nowcast", version, about = "Visualize weather forecasts as synthetic webcam images")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the descriptor normalizer on the training years of an NWP table.
    FitNormalizer(FitNormalizerArgs),
    /// Index a site archive and write train/test manifests and the analog table.
    BuildDataset(BuildDatasetArgs),
    /// Train the generator (adversarial) or the L1 regression baseline.
    Train(TrainArgs),
    /// Synthesize a forecast image sequence from a current frame.
    Nowcast(NowcastArgs),
    /// Retrieve archived analog images for a forecast.
    Analog(AnalogArgs),
    /// Sample a blinded realism study.
    EvalSample(EvalSampleArgs),
    /// Serve a realism study over HTTP.
    EvalServe(EvalServeArgs),
    /// Print confusion matrices and condition-audit scores.
    EvalReport(EvalReportArgs),
    /// Run fast built-in consistency checks.
    Selftest,
}

#[derive(Debug, Args)]
pub struct FitNormalizerArgs {
    #[arg(long)]
    pub nwp: PathBuf,
    #[arg(long)]
    pub site: Option<String>,
    /// Years whose records are used for fitting.
    #[arg(long, value_delimiter = ',', required = true)]
    pub years: Vec<i32>,
    /// Identifier stamped on normalized descriptors.
    #[arg(long)]
    pub id: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Site archive plus its normalized NWP descriptors.
#[derive(Debug, Args, Clone)]
pub struct SourceArgs {
    /// Directory of `<site>_<timestamp>.{png,jpg}` frames.
    #[arg(long)]
    pub archive: PathBuf,
    #[arg(long)]
    pub site: String,
    #[arg(long)]
    pub nwp: PathBuf,
    #[arg(long)]
    pub normalizer: PathBuf,
    /// File of RFC 3339 timestamps to drop (one per line).
    #[arg(long)]
    pub exclusions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildDatasetArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    pub train_years: Vec<i32>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub test_years: Vec<i32>,
    #[arg(long, default_value_t = 360)]
    pub max_lead: u32,
    #[arg(long, default_value_t = 10)]
    pub lead_step: u32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Adversarial,
    L1Baseline,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    /// Training manifest written by `build-dataset`.
    #[arg(long)]
    pub manifest: PathBuf,
    /// TOML training configuration; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Override the configured number of steps.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Continue from a checkpoint instead of fresh weights.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    /// NWP table containing the forecast for the site.
    #[arg(long)]
    pub nwp: PathBuf,
    #[arg(long)]
    pub normalizer: PathBuf,
    #[arg(long)]
    pub site: Option<String>,
    /// Time of the current frame.
    #[arg(long, value_parser = parse_time)]
    pub t0: DateTime<Utc>,
    /// Lead times in minutes.
    #[arg(long, value_delimiter = ',', default_values_t = [0u32, 60, 120, 180, 240, 300, 360])]
    pub leads: Vec<u32>,
}

#[derive(Debug, Args)]
pub struct NowcastArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Current webcam frame `I₀`.
    #[arg(long)]
    pub image: PathBuf,
    #[command(flatten)]
    pub forecast: ForecastArgs,
    #[arg(long, default_value_t = nowcast_core::synthesis::DEFAULT_SIGMA)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Draw a separate latent vector per lead.
    #[arg(long)]
    pub per_lead_z: bool,
    /// Display aspect ratio (width / height) of exported frames.
    #[arg(long, default_value_t = 2.0)]
    pub aspect: f64,
    /// Site name used in output file names.
    #[arg(long, default_value = "site")]
    pub label: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnalogMode {
    Individual,
    Sequence,
}

#[derive(Debug, Args)]
pub struct AnalogArgs {
    #[arg(value_enum)]
    pub mode: AnalogMode,
    /// Analog table written by `build-dataset`.
    #[arg(long)]
    pub table: PathBuf,
    #[command(flatten)]
    pub forecast: ForecastArgs,
    /// Cadence of the retrieved run in sequence mode; defaults to the lead spacing.
    #[arg(long)]
    pub cadence: Option<i64>,
}

#[derive(Debug, Args)]
pub struct EvalSampleArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Test manifest written by `build-dataset`.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 75)]
    pub pairs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = nowcast_core::synthesis::DEFAULT_SIGMA)]
    pub sigma: f64,
    #[arg(long, default_value_t = 2.0)]
    pub aspect: f64,
    /// Examiner ids; each gets a random subset of the items.
    #[arg(long, value_delimiter = ',')]
    pub examiners: Vec<String>,
    #[arg(long, default_value_t = 30)]
    pub per_examiner: usize,
    /// Pairs exported for the condition audit.
    #[arg(long, default_value_t = 45)]
    pub audit_pairs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalServeArgs {
    /// Study directory containing items.json, truth.json and the images.
    #[arg(long)]
    pub study: PathBuf,
    /// Judgment log; defaults to `<study>/judgments.jsonl`.
    #[arg(long)]
    pub judgments: Option<PathBuf>,
    /// Examiner assignments; defaults to `<study>/assignments.json` when present.
    #[arg(long)]
    pub assignments: Option<PathBuf>,
    /// Directory served at `/` (the labeling UI).
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
}

#[derive(Debug, Args)]
pub struct EvalReportArgs {
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub judgments: Option<PathBuf>,
    /// Condition-audit checklists as `SITE=PATH.csv`.
    #[arg(long = "checklists", value_parser = parse_site_path)]
    pub checklists: Vec<(String, PathBuf)>,
    /// Emit JSON instead of tables.
    #[arg(long)]
    pub json: bool,
}

fn parse_site_path(s: &str) -> Result<(String, PathBuf), String> {
    let (site, path) = s.split_once('=').ok_or("expected SITE=PATH")?;
    if site.is_empty() || path.is_empty() {
        return Err("expected SITE=PATH".into());
    }
    Ok((site.to_string(), PathBuf::from(path)))
}
