//! The `lobsurv` command line: argument parsing, config-file merging, run
//! manifests and one function per subcommand.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use lobsurv_core::book::{replay_with, CrossingMode};
use lobsurv_core::features::{FeatureMode, TapeConfig};
use lobsurv_core::lobster::{self, ParseOptions};
use lobsurv_core::probes::{self, build_dataset, Clock, Dataset, DatasetSpec, DayReplay, ProbeMode, SideChoice};
use lobsurv_core::survival::{KaplanMeier, SurvivalError};
use lobsurv_core::synth;
use lobsurv_neural::interpret::{self, InterpretError, ShapleyEstimate};
use lobsurv_neural::models::{DecoderConfig, EncoderConfig, EncoderKind, MaskKind, ModelError, SurvivalModel};
use lobsurv_neural::params::{checkpoint_paths, AdamConfig};
use lobsurv_neural::training::{self, BenchmarkSpec, SplitSizes, TrainConfig, TrainError};

#[derive(Debug, Error, PartialEq)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Data(_) => "data",
            CliError::Numeric(_) => "numeric",
        }
    }

    /// Single-line JSON for stderr.
    pub fn diagnostic(&self) -> String {
        json!({ "error": self.kind(), "code": self.exit_code(), "reason": self.to_string() }).to_string()
    }
}

fn usage(e: impl Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn data(e: impl Display) -> CliError {
    CliError::Data(e.to_string())
}

fn at(path: &Path, e: impl Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) | ModelError::NoAttention(_) => usage(e),
            ModelError::Tensor(_) => CliError::Numeric(e.to_string()),
            ModelError::Input(_) | ModelError::Param(_) | ModelError::Json(_) => data(e),
        }
    }
}

impl From<SurvivalError> for CliError {
    fn from(e: SurvivalError) -> Self {
        match e {
            SurvivalError::Empty | SurvivalError::NonPositive { .. } | SurvivalError::Shape => data(e),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => usage(e),
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::EmptySplit(_) => data(e),
            TrainError::Model(m) => m.into(),
            TrainError::Survival(s) => s.into(),
        }
    }
}

impl From<InterpretError> for CliError {
    fn from(e: InterpretError) -> Self {
        match e {
            InterpretError::Model(m) => m.into(),
            InterpretError::Shape(_) => data(e),
            _ => usage(e),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lobsurv", version, about = "Fill-time survival modelling for limit order books")]
pub struct Cli {
    /// Maximum worker threads for parallel work
    #[arg(long, global = true, default_value_t = 1, display_order = 900)]
    pub threads: usize,
    /// JSON config file: top-level "threads" and one object of option values per subcommand
    #[arg(long, global = true, display_order = 901)]
    pub config: Option<PathBuf>,
    /// Log progress to stderr
    #[arg(short, long, global = true, display_order = 902)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", content = "options", rename_all = "kebab-case")]
pub enum Command {
    /// Generate synthetic trading days as LOBSTER message and order book files
    Synth(SynthArgs),
    /// Replay a message file, check book invariants and compare with an order book file
    ReplayCheck(ReplayArgs),
    /// Simulate probe orders and write a survival dataset
    BuildDataset(BuildArgs),
    /// Kaplan-Meier curve of a dataset's observed times
    Km(KmArgs),
    /// Fill probability and mean fill time within a horizon
    FillStats(FillArgs),
    /// Train a model and write a checkpoint
    Fit(FitArgs),
    /// Score a checkpoint on a dataset split
    Evaluate(EvalArgs),
    /// Train every encoder at every lookback over several seeds
    Benchmark(BenchArgs),
    /// Shapley values and attention heatmaps for a checkpoint
    Explain(ExplainArgs),
    /// Conv-transformer kernel size sweep
    SweepKernel(SweepArgs),
    /// Re-run the command recorded in a run manifest and verify its artifacts
    Rerun(RerunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::ReplayCheck(_) => "replay-check",
            Command::BuildDataset(_) => "build-dataset",
            Command::Km(_) => "km",
            Command::FillStats(_) => "fill-stats",
            Command::Fit(_) => "fit",
            Command::Evaluate(_) => "evaluate",
            Command::Benchmark(_) => "benchmark",
            Command::Explain(_) => "explain",
            Command::SweepKernel(_) => "sweep-kernel",
            Command::Rerun(_) => "rerun",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    /// Seed of the first generated day
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Message file; the order book is written next to it with an _orderbook suffix
    #[arg(long, default_value = "day.csv")]
    pub out: PathBuf,
    /// Generator preset
    #[arg(long, default_value = "default", value_parser = synth::PRESETS)]
    pub preset: String,
    /// Session length in seconds
    #[arg(long, default_value_t = 23_400.0)]
    pub horizon: f64,
    /// Order book levels per side
    #[arg(long, default_value_t = 5)]
    pub levels: usize,
    /// Days to generate with seeds seed, seed+1, ...; more than one adds a _<k> suffix
    #[arg(long, default_value_t = 1)]
    pub days: usize,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// Message file to replay
    pub messages: PathBuf,
    /// Order book file to compare with [default: the _orderbook file next to the messages, if any]
    #[arg(long)]
    pub orderbook: Option<PathBuf>,
    /// Order book levels per side
    #[arg(long, default_value_t = 5)]
    pub levels: usize,
    /// Let crossing submissions execute instead of rejecting them
    #[arg(long)]
    pub lenient: bool,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct BuildArgs {
    /// Message files, one per day in chronological order; without any, days are generated
    pub inputs: Vec<PathBuf>,
    /// Dataset CSV; its manifest goes to <out>.manifest.json
    #[arg(long, default_value = "dataset.csv")]
    pub out: PathBuf,
    /// Probe type
    #[arg(long, default_value = "pegged", value_parser = ["tracked", "pegged", "inside_spread"])]
    pub mode: String,
    /// Ticks inside the best quote for inside_spread probes
    #[arg(long, default_value_t = 1)]
    pub ticks: u32,
    /// Probes per day
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// Lookback window in trades
    #[arg(long = "T", default_value_t = 50)]
    pub lookback: usize,
    /// Clock of the observed times
    #[arg(long, default_value = "wall", value_parser = ["wall", "transaction"])]
    pub clock: String,
    /// Window columns
    #[arg(long, default_value = "raw", value_parser = ["raw", "order_flow"])]
    pub features: String,
    /// Probe side
    #[arg(long, default_value = "buy", value_parser = ["buy", "sell", "random"])]
    pub side: String,
    /// Seed for probe placement
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Days to generate when no message files are given
    #[arg(long, default_value_t = 10)]
    pub synth_days: usize,
    /// Generator preset for generated days
    #[arg(long, default_value = "default", value_parser = synth::PRESETS)]
    pub preset: String,
    /// Seed of the first generated day
    #[arg(long, default_value_t = 1)]
    pub synth_seed: u64,
    /// Let crossing submissions execute instead of rejecting them
    #[arg(long)]
    pub lenient: bool,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct KmArgs {
    /// Dataset CSV written by build-dataset
    pub dataset: PathBuf,
    /// Curve CSV
    #[arg(long, default_value = "km.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct FillArgs {
    /// Dataset CSV written by build-dataset
    pub dataset: PathBuf,
    /// Horizon in the dataset's clock units
    #[arg(long, default_value_t = 60.0)]
    pub horizon: f64,
    /// Also write the statistics as JSON
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ModelArgs {
    /// Latent size between encoder and decoder
    #[arg(long, default_value_t = 8)]
    pub latent: usize,
    /// Convolution kernel size
    #[arg(long, default_value_t = 3)]
    pub kernel: usize,
    /// Convolution dilation; the CNN doubles it per layer
    #[arg(long, default_value_t = 1)]
    pub dilation: usize,
    /// Attention heads
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// Width per attention head
    #[arg(long, default_value_t = 2)]
    pub head_dim: usize,
    /// CNN and MLP encoder layers
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    /// CNN and MLP hidden width
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    /// Attention mask
    #[arg(long, default_value = "causal", value_parser = ["causal", "log_sparse"])]
    pub mask: String,
    /// Decoder hidden widths
    #[arg(long, default_value = "16,16", value_delimiter = ',')]
    pub decoder_hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Maximum training epochs
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    /// Minibatch size
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Adam learning rate
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Epochs without validation improvement before stopping
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    /// Global gradient norm clip
    #[arg(long, default_value_t = 5.0)]
    pub clip_norm: f64,
    /// Share of the chronologically ordered samples used for validation
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    /// Share of the latest samples held out for testing
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct FitArgs {
    /// Dataset CSV written by build-dataset
    pub dataset: PathBuf,
    /// Checkpoint stem: writes <out>.json, <out>.bin and <out>.fit.json
    #[arg(long, default_value = "model")]
    pub out: PathBuf,
    /// Encoder architecture
    #[arg(long, default_value = "conv_transformer", value_parser = ["mlp", "cnn", "conv_transformer"])]
    pub encoder: String,
    /// Lookback in trades, keeping the last rows of each window [default: the dataset's]
    #[arg(long = "T")]
    pub lookback: Option<usize>,
    /// Seed for initialisation and shuffling
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    /// Checkpoint stem written by fit
    pub checkpoint: PathBuf,
    /// Dataset CSV written by build-dataset
    pub dataset: PathBuf,
    /// Chronological split to score
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test", "all"])]
    pub split: String,
    /// Validation share used to locate the split
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    /// Test share used to locate the split
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    /// Also write the report as JSON
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct BenchArgs {
    /// Dataset CSV written by build-dataset
    pub dataset: PathBuf,
    /// Encoders to compare
    #[arg(long, default_value = "mlp,cnn,conv_transformer", value_delimiter = ',',
          value_parser = ["mlp", "cnn", "conv_transformer"])]
    pub encoders: Vec<String>,
    /// Lookbacks in trades
    #[arg(long = "T", default_value = "50,500,1000", value_delimiter = ',')]
    pub lookbacks: Vec<usize>,
    /// Number of seeds per cell
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    /// First seed; the others follow consecutively
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    /// Directory for the tables and per-run results
    #[arg(long, default_value = "benchmark")]
    pub out_dir: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    /// Dataset CSV written by build-dataset
    pub dataset: PathBuf,
    /// Kernel sizes to try
    #[arg(long, default_value = "1,2,3,5,10,25,50", value_delimiter = ',')]
    pub kernels: Vec<usize>,
    /// Lookback in trades
    #[arg(long = "T", default_value_t = 50)]
    pub lookback: usize,
    /// Number of seeds per kernel size
    #[arg(long, default_value_t = 2)]
    pub seeds: usize,
    /// First seed; the others follow consecutively
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    /// Directory for the table and per-run results
    #[arg(long, default_value = "sweep")]
    pub out_dir: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ExplainArgs {
    /// Checkpoint stem written by fit
    pub checkpoint: PathBuf,
    /// Dataset CSV written by build-dataset
    pub dataset: PathBuf,
    /// Windows to explain, taken in order from the split
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    /// Background windows, evenly spaced over the training split
    #[arg(long, default_value_t = 20)]
    pub background: usize,
    /// Sampled permutations per window; multiples of the background size make the values add up exactly
    #[arg(long, default_value_t = 100)]
    pub permutations: usize,
    /// Horizon of the explained fill probability [default: median observed time in the training split]
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Seed for permutation sampling
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Split the explained windows come from
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test", "all"])]
    pub split: String,
    /// Validation share used to locate the splits
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    /// Test share used to locate the splits
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    /// Write per-head attention heatmaps of the first explained window (conv_transformer only)
    #[arg(long)]
    pub heatmaps: bool,
    /// Directory for the exports
    #[arg(long, default_value = "explain")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct RerunArgs {
    /// Run manifest written by an earlier command
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

/// Written next to every artifact set. `invocation` holds the fully
/// resolved options, so the run can be repeated without the original flags
/// or config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub invocation: Command,
    pub threads: usize,
    pub config_hash: String,
    pub inputs: Vec<FileHash>,
    pub seed: Option<u64>,
    pub version: String,
    pub outputs: Vec<FileHash>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<FileHash, CliError> {
    let bytes = fs::read(path).map_err(|e| at(path, e))?;
    Ok(FileHash {
        path: path.to_path_buf(),
        sha256: sha256_hex(&bytes),
    })
}

/// What a command touched.
#[derive(Debug, Default)]
struct Artifacts {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seed: Option<u64>,
    manifest: Option<PathBuf>,
}

/// `day.csv` -> `day_orderbook.csv`; `X_message_5.csv` -> `X_orderbook_5.csv`.
pub fn orderbook_path(messages: &Path) -> PathBuf {
    let name = messages.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let renamed = if name.contains("_message") {
        name.replacen("_message", "_orderbook", 1)
    } else {
        match name.rsplit_once('.') {
            Some((stem, ext)) => format!("{stem}_orderbook.{ext}"),
            None => format!("{name}_orderbook"),
        }
    };
    messages.with_file_name(renamed)
}

fn day_path(out: &Path, k: usize, days: usize) -> PathBuf {
    if days == 1 {
        return out.to_path_buf();
    }
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let renamed = match name.rsplit_once('.') {
        Some((stem, ext)) => format!("{stem}_{}.{ext}", k + 1),
        None => format!("{name}_{}", k + 1),
    };
    out.with_file_name(renamed)
}

fn manifest_for(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".run.json");
    s.into()
}

fn parse_name<T: DeserializeOwned>(what: &str, s: &str) -> Result<T, CliError> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|_| usage(format!("unknown {what} '{s}'")))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| at(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| at(path, e))
}

fn to_json(v: &impl Serialize) -> String {
    serde_json::to_string_pretty(v).expect("plain data serializes")
}

fn init_logging(verbose: bool) {
    let level = if verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
}

/// Overlay a config-file section on parsed options; flags given on the
/// command line keep their values.
fn merge<T: Serialize + DeserializeOwned>(
    parsed: T,
    matches: &ArgMatches,
    section: Option<&Value>,
    name: &str,
) -> Result<T, CliError> {
    let Some(section) = section else {
        return Ok(parsed);
    };
    let Value::Object(file) = section else {
        return Err(usage(format!("config section '{name}' must be an object")));
    };
    let mut value = serde_json::to_value(&parsed).map_err(usage)?;
    let options = value.as_object_mut().expect("options serialize to an object");
    for (key, v) in file {
        if !options.contains_key(key) {
            return Err(usage(format!("unknown option '{key}' in config section '{name}'")));
        }
        if matches.value_source(key) != Some(ValueSource::CommandLine) {
            options.insert(key.clone(), v.clone());
        }
    }
    serde_json::from_value(value).map_err(|e| usage(format!("config section '{name}': {e}")))
}

fn resolve(command: Command, matches: &ArgMatches, section: Option<&Value>) -> Result<Command, CliError> {
    let name = command.name();
    Ok(match command {
        Command::Synth(a) => Command::Synth(merge(a, matches, section, name)?),
        Command::ReplayCheck(a) => Command::ReplayCheck(merge(a, matches, section, name)?),
        Command::BuildDataset(a) => Command::BuildDataset(merge(a, matches, section, name)?),
        Command::Km(a) => Command::Km(merge(a, matches, section, name)?),
        Command::FillStats(a) => Command::FillStats(merge(a, matches, section, name)?),
        Command::Fit(a) => Command::Fit(merge(a, matches, section, name)?),
        Command::Evaluate(a) => Command::Evaluate(merge(a, matches, section, name)?),
        Command::Benchmark(a) => Command::Benchmark(merge(a, matches, section, name)?),
        Command::Explain(a) => Command::Explain(merge(a, matches, section, name)?),
        Command::SweepKernel(a) => Command::SweepKernel(merge(a, matches, section, name)?),
        Command::Rerun(a) => Command::Rerun(merge(a, matches, section, name)?),
    })
}

fn read_config(path: &Path) -> Result<Value, CliError> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    let Value::Object(map) = &value else {
        return Err(usage("config file must hold a JSON object"));
    };
    let known: Vec<String> = Cli::command().get_subcommands().map(|c| c.get_name().to_string()).collect();
    for key in map.keys() {
        if key != "threads" && !known.contains(key) {
            return Err(usage(format!("unknown config key '{key}'")));
        }
    }
    Ok(value)
}

/// Parse `args` (program name first) and run the command.
pub fn run<I, S>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments");
            return Err(usage(line.trim_start_matches("error: ")));
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(usage)?;
    init_logging(cli.verbose);
    let file = cli.config.as_deref().map(read_config).transpose()?;
    let mut threads = cli.threads;
    if matches.value_source("threads") != Some(ValueSource::CommandLine) {
        if let Some(v) = file.as_ref().and_then(|f| f.get("threads")) {
            threads = v.as_u64().ok_or_else(|| usage("config 'threads' must be a positive integer"))? as usize;
        }
    }
    if threads == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    let (name, sub) = matches.subcommand().expect("a subcommand is required");
    let section = file.as_ref().and_then(|f| f.get(name));
    let command = resolve(cli.command, sub, section)?;
    execute(&command, threads).map(|_| ())
}

/// Run a resolved command and write its manifest; returns the manifest.
pub fn execute(command: &Command, threads: usize) -> Result<Option<RunManifest>, CliError> {
    let artifacts = match command {
        Command::Synth(a) => synth_cmd(a)?,
        Command::ReplayCheck(a) => replay_check(a)?,
        Command::BuildDataset(a) => build_dataset_cmd(a)?,
        Command::Km(a) => km(a)?,
        Command::FillStats(a) => fill_stats(a)?,
        Command::Fit(a) => fit(a)?,
        Command::Evaluate(a) => evaluate(a)?,
        Command::Benchmark(a) => benchmark(a, threads)?,
        Command::Explain(a) => explain(a, threads)?,
        Command::SweepKernel(a) => sweep_kernel(a, threads)?,
        Command::Rerun(a) => return rerun(a),
    };
    let Some(path) = artifacts.manifest else {
        return Ok(None);
    };
    let manifest = RunManifest {
        command: command.name().to_string(),
        invocation: command.clone(),
        threads,
        config_hash: sha256_hex(serde_json::to_string(command).map_err(data)?.as_bytes()),
        inputs: artifacts.inputs.iter().map(|p| hash_file(p)).collect::<Result<_, _>>()?,
        seed: artifacts.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        outputs: artifacts.outputs.iter().map(|p| hash_file(p)).collect::<Result<_, _>>()?,
    };
    write_file(&path, to_json(&manifest))?;
    Ok(Some(manifest))
}

fn rerun(a: &RerunArgs) -> Result<Option<RunManifest>, CliError> {
    let text = fs::read_to_string(&a.manifest).map_err(|e| at(&a.manifest, e))?;
    let old: RunManifest = serde_json::from_str(&text).map_err(|e| at(&a.manifest, e))?;
    if matches!(old.invocation, Command::Rerun(_)) {
        return Err(usage("a manifest cannot record a rerun"));
    }
    for input in &old.inputs {
        if hash_file(&input.path)?.sha256 != input.sha256 {
            return Err(data(format!("input {} changed since the recorded run", input.path.display())));
        }
    }
    let new = execute(&old.invocation, old.threads)?.ok_or_else(|| data("the recorded command writes no artifacts"))?;
    if new.outputs.len() != old.outputs.len() {
        return Err(data("the re-run wrote a different set of artifacts"));
    }
    for (o, n) in old.outputs.iter().zip(&new.outputs) {
        if o != n {
            return Err(data(format!("artifact {} differs from the recorded run", o.path.display())));
        }
    }
    println!("{}", json!({ "reproduced": true, "artifacts": new.outputs.len() }));
    Ok(Some(new))
}

fn synth_cmd(a: &SynthArgs) -> Result<Artifacts, CliError> {
    if a.days == 0 {
        return Err(usage("--days must be at least 1"));
    }
    let mut outputs = Vec::new();
    for k in 0..a.days {
        let mut cfg = synth::preset(&a.preset, a.seed + k as u64).ok_or_else(|| usage(format!("unknown preset '{}'", a.preset)))?;
        cfg.horizon = a.horizon;
        cfg.snapshot_levels = a.levels;
        let day = synth::generate(&cfg).map_err(usage)?;
        let messages = day_path(&a.out, k, a.days);
        let book = orderbook_path(&messages);
        let mut buf = Vec::new();
        lobster::write_messages(&day.messages, &mut buf).map_err(data)?;
        write_file(&messages, &buf)?;
        buf.clear();
        lobster::write_snapshots(&day.snapshots, &mut buf).map_err(data)?;
        write_file(&book, &buf)?;
        log::info!("day {}: {} messages -> {}", k + 1, day.messages.len(), messages.display());
        outputs.push(messages);
        outputs.push(book);
    }
    println!("{}", json!({ "days": a.days, "files": outputs }));
    Ok(Artifacts {
        manifest: Some(manifest_for(&a.out)),
        inputs: Vec::new(),
        outputs,
        seed: Some(a.seed),
    })
}

fn read_messages(path: &Path) -> Result<Vec<lobster::Message>, CliError> {
    let file = fs::File::open(path).map_err(|e| at(path, e))?;
    lobster::parse_messages(std::io::BufReader::new(file), &ParseOptions::default()).map_err(|e| at(path, e))
}

fn crossing(lenient: bool) -> CrossingMode {
    if lenient {
        CrossingMode::Lenient
    } else {
        CrossingMode::Strict
    }
}

fn replay_check(a: &ReplayArgs) -> Result<Artifacts, CliError> {
    let messages = read_messages(&a.messages)?;
    let regressions = lobster::time_regressions(&messages);
    if let Some(i) = regressions.first() {
        return Err(at(&a.messages, format!("timestamps go backwards at row {}", i + 2)));
    }
    let mut replayed = Vec::with_capacity(messages.len());
    let mut violation = None;
    replay_with(&messages, crossing(a.lenient), |i, _, _, book| {
        if violation.is_none() {
            if let Err(e) = book.check_invariants() {
                violation = Some(format!("row {}: {e}", i + 1));
            }
        }
        replayed.push(book.snapshot(a.levels));
    })
    .map_err(|e| at(&a.messages, e))?;
    if let Some(v) = violation {
        return Err(at(&a.messages, format!("book invariant violated at {v}")));
    }
    let book_path = match &a.orderbook {
        Some(p) => Some(p.clone()),
        None => Some(orderbook_path(&a.messages)).filter(|p| p.exists()),
    };
    let mut compared = 0;
    if let Some(path) = &book_path {
        let file = fs::File::open(path).map_err(|e| at(path, e))?;
        let expected = lobster::parse_snapshots(std::io::BufReader::new(file), a.levels).map_err(|e| at(path, e))?;
        if expected.len() != replayed.len() {
            return Err(at(path, format!("{} rows, the replay produced {}", expected.len(), replayed.len())));
        }
        if let Some(i) = expected.iter().zip(&replayed).position(|(e, r)| e != r) {
            return Err(at(path, format!("row {} differs from the replayed book", i + 1)));
        }
        compared = expected.len();
    }
    println!(
        "{}",
        json!({ "messages": messages.len(), "orderbook": book_path, "rows_compared": compared, "status": "ok" })
    );
    Ok(Artifacts::default())
}

fn build_dataset_cmd(a: &BuildArgs) -> Result<Artifacts, CliError> {
    let mode = match a.mode.as_str() {
        "tracked" => ProbeMode::Tracked,
        "pegged" => ProbeMode::Pegged,
        "inside_spread" => ProbeMode::InsideSpread { ticks: a.ticks },
        other => return Err(usage(format!("unknown probe mode '{other}'"))),
    };
    let spec = DatasetSpec {
        mode,
        n_per_day: a.n,
        seed: a.seed,
        lookback: a.lookback,
        clock: parse_name::<Clock>("clock", &a.clock)?,
        features: parse_name::<FeatureMode>("feature set", &a.features)?,
        side: parse_name::<SideChoice>("side", &a.side)?,
        ..DatasetSpec::default()
    };
    if spec.lookback == 0 || spec.n_per_day == 0 {
        return Err(usage("--T and --n must be positive"));
    }
    let mut days = Vec::new();
    if a.inputs.is_empty() {
        if a.synth_days == 0 {
            return Err(usage("give message files or a positive --synth-days"));
        }
        for k in 0..a.synth_days {
            let cfg = synth::preset(&a.preset, a.synth_seed + k as u64)
                .ok_or_else(|| usage(format!("unknown preset '{}'", a.preset)))?;
            let tape = TapeConfig {
                tick: cfg.tick,
                ..TapeConfig::default()
            };
            let day = synth::generate(&cfg).map_err(usage)?;
            days.push(DayReplay::new(day.messages, crossing(a.lenient), tape).map_err(data)?);
        }
    } else {
        for path in &a.inputs {
            let messages = read_messages(path)?;
            days.push(DayReplay::new(messages, crossing(a.lenient), TapeConfig::default()).map_err(|e| at(path, e))?);
        }
    }
    let dataset = build_dataset(&days, &spec).map_err(data)?;
    if dataset.samples.is_empty() {
        return Err(data("no probe produced a sample; try a shorter --T"));
    }
    write_dataset(&dataset, &a.out)?;
    let fills = dataset.samples.iter().filter(|s| s.delta).count();
    println!(
        "{}",
        json!({ "samples": dataset.samples.len(), "days": days.len(), "fills": fills, "out": a.out })
    );
    Ok(Artifacts {
        manifest: Some(manifest_for(&a.out)),
        inputs: a.inputs.clone(),
        outputs: vec![a.out.clone(), probes::manifest_path(&a.out)],
        seed: Some(a.seed),
    })
}

fn write_dataset(dataset: &Dataset, out: &Path) -> Result<(), CliError> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| at(dir, e))?;
    }
    dataset.write(out).map_err(|e| at(out, e))
}

fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    let d = Dataset::read(path).map_err(|e| at(path, e))?;
    if d.samples.is_empty() {
        return Err(at(path, "no samples"));
    }
    Ok(d)
}

fn outcomes(d: &Dataset) -> Vec<(f64, bool)> {
    d.samples.iter().map(|s| (s.z, s.delta)).collect()
}

fn km(a: &KmArgs) -> Result<Artifacts, CliError> {
    let d = read_dataset(&a.dataset)?;
    let curve = KaplanMeier::fit(&outcomes(&d));
    let mut csv = String::from("time,survival,at_risk,events\n");
    for i in 0..curve.times.len() {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            curve.times[i], curve.survival[i], curve.at_risk[i], curve.events[i]
        ));
    }
    write_file(&a.out, csv)?;
    println!("{}", json!({ "samples": d.samples.len(), "event_times": curve.times.len(), "out": a.out }));
    Ok(Artifacts {
        manifest: Some(manifest_for(&a.out)),
        inputs: vec![a.dataset.clone(), probes::manifest_path(&a.dataset)],
        outputs: vec![a.out.clone()],
        seed: None,
    })
}

fn fill_stats(a: &FillArgs) -> Result<Artifacts, CliError> {
    let d = read_dataset(&a.dataset)?;
    if !(a.horizon > 0.0) {
        return Err(usage("--horizon must be positive"));
    }
    let stats = probes::fill_stats(&outcomes(&d), a.horizon).map_err(data)?;
    let report = json!({ "horizon": a.horizon, "clock": d.manifest.clock, "stats": stats });
    println!("{report}");
    let Some(out) = &a.out else {
        return Ok(Artifacts::default());
    };
    write_file(out, to_json(&report))?;
    Ok(Artifacts {
        manifest: Some(manifest_for(out)),
        inputs: vec![a.dataset.clone(), probes::manifest_path(&a.dataset)],
        outputs: vec![out.clone()],
        seed: None,
    })
}

fn encoder_template(kind: EncoderKind, lookback: usize, features: usize, m: &ModelArgs) -> Result<EncoderConfig, CliError> {
    let mut e = EncoderConfig::new(kind, lookback, features);
    e.latent = m.latent;
    e.kernel = m.kernel;
    e.dilation = m.dilation;
    e.heads = m.heads;
    e.head_dim = m.head_dim;
    e.layers = m.layers;
    e.hidden = m.hidden;
    e.mask = parse_name::<MaskKind>("mask", &m.mask)?;
    Ok(e)
}

fn train_config(t: &TrainArgs, seed: u64) -> Result<TrainConfig, CliError> {
    let cfg = TrainConfig {
        adam: AdamConfig {
            lr: t.lr,
            ..AdamConfig::default()
        },
        batch_size: t.batch_size,
        epochs: t.epochs,
        patience: t.patience,
        clip_norm: t.clip_norm,
        seed,
        val_fraction: t.val_fraction,
        test_fraction: t.test_fraction,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn split_view<'a>(d: &'a Dataset, name: &str, val: f64, test: f64) -> Vec<&'a probes::SurvivalSample> {
    let split = training::chronological_split(&d.samples, val, test);
    let idx: Vec<usize> = match name {
        "train" => split.train,
        "val" => split.val,
        "test" => split.test,
        _ => (0..d.samples.len()).collect(),
    };
    idx.into_iter().map(|i| &d.samples[i]).collect()
}

/// Cut the dataset's windows to `lookback` rows.
fn with_lookback(d: Dataset, lookback: usize) -> Result<Dataset, CliError> {
    if lookback == 0 || lookback > d.manifest.lookback {
        return Err(usage(format!("lookback {lookback} outside the dataset's 1..={}", d.manifest.lookback)));
    }
    Ok(if lookback == d.manifest.lookback {
        d
    } else {
        d.truncate_lookback(lookback)
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub train_config: TrainConfig,
    pub split: SplitSizes,
    pub history: Vec<training::EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub test: Option<training::EvalReport>,
}

fn fit(a: &FitArgs) -> Result<Artifacts, CliError> {
    let d = read_dataset(&a.dataset)?;
    let lookback = a.lookback.unwrap_or(d.manifest.lookback);
    let d = with_lookback(d, lookback)?;
    let kind = EncoderKind::parse(&a.encoder).ok_or_else(|| usage(format!("unknown encoder '{}'", a.encoder)))?;
    let enc = encoder_template(kind, lookback, d.manifest.width, &a.model)?;
    let cfg = train_config(&a.train, a.seed)?;
    let train = split_view(&d, "train", cfg.val_fraction, cfg.test_fraction);
    let val = split_view(&d, "val", cfg.val_fraction, cfg.test_fraction);
    let test = split_view(&d, "test", cfg.val_fraction, cfg.test_fraction);
    let decoder = DecoderConfig {
        hidden: a.model.decoder_hidden.clone(),
    };
    let model_cfg = training::fitted_config(enc, decoder, d.manifest.feature_names.clone(), &train, a.seed)?;
    let model = SurvivalModel::new(model_cfg)?;
    let result = training::fit(model, &train, &val, &cfg)?;
    let test_report = if test.is_empty() {
        None
    } else {
        Some(training::evaluate(&result.model, &test)?)
    };
    let (json_path, bin_path) = checkpoint_paths(&a.out);
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| at(dir, e))?;
    }
    result.model.save(&a.out)?;
    let report = FitReport {
        train_config: cfg,
        split: SplitSizes {
            train: train.len(),
            val: val.len(),
            test: test.len(),
        },
        history: result.history,
        best_epoch: result.best_epoch,
        stopped_early: result.stopped_early,
        test: test_report,
    };
    let report_path = a.out.with_extension("fit.json");
    write_file(&report_path, to_json(&report))?;
    println!(
        "{}",
        json!({ "checkpoint": a.out, "best_epoch": report.best_epoch, "test": report.test })
    );
    Ok(Artifacts {
        manifest: Some(a.out.with_extension("run.json")),
        inputs: vec![a.dataset.clone(), probes::manifest_path(&a.dataset)],
        outputs: vec![json_path, bin_path, report_path],
        seed: Some(a.seed),
    })
}

/// Load a checkpoint and shape the dataset to its windows.
fn model_and_data(checkpoint: &Path, dataset: &Path) -> Result<(SurvivalModel, Dataset), CliError> {
    let model = SurvivalModel::load(checkpoint)?;
    let d = read_dataset(dataset)?;
    let rows = d.manifest.lookback;
    let need = model.config.encoder.lookback;
    let d = with_lookback(d, need).map_err(|_| data(format!("dataset windows have {rows} rows, the model needs {need}")))?;
    model.check_manifest(&d.manifest)?;
    Ok((model, d))
}

fn checkpoint_inputs(checkpoint: &Path, dataset: &Path) -> Vec<PathBuf> {
    let (j, b) = checkpoint_paths(checkpoint);
    vec![j, b, dataset.to_path_buf(), probes::manifest_path(dataset)]
}

fn evaluate(a: &EvalArgs) -> Result<Artifacts, CliError> {
    let (model, d) = model_and_data(&a.checkpoint, &a.dataset)?;
    let samples = split_view(&d, &a.split, a.val_fraction, a.test_fraction);
    if samples.is_empty() {
        return Err(data(format!("the {} split is empty", a.split)));
    }
    let report = training::evaluate(&model, &samples)?;
    let out = json!({ "split": a.split, "val_fraction": a.val_fraction, "test_fraction": a.test_fraction, "report": report });
    println!("{out}");
    let Some(path) = &a.out else {
        return Ok(Artifacts::default());
    };
    write_file(path, to_json(&out))?;
    Ok(Artifacts {
        manifest: Some(manifest_for(path)),
        inputs: checkpoint_inputs(&a.checkpoint, &a.dataset),
        outputs: vec![path.clone()],
        seed: None,
    })
}

fn seed_list(first: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|k| first + k).collect()
}

fn benchmark(a: &BenchArgs, threads: usize) -> Result<Artifacts, CliError> {
    let d = read_dataset(&a.dataset)?;
    let encoders = a
        .encoders
        .iter()
        .map(|e| EncoderKind::parse(e).ok_or_else(|| usage(format!("unknown encoder '{e}'"))))
        .collect::<Result<Vec<_>, _>>()?;
    let seeds = seed_list(a.first_seed, a.seeds);
    let spec = BenchmarkSpec {
        encoders,
        lookbacks: a.lookbacks.clone(),
        template: encoder_template(EncoderKind::Mlp, d.manifest.lookback, d.manifest.width, &a.model)?,
        decoder: DecoderConfig {
            hidden: a.model.decoder_hidden.clone(),
        },
        train: train_config(&a.train, a.first_seed)?,
        seeds,
        threads,
    };
    let result = training::benchmark_suite(&d, &spec)?;
    let scores = a.out_dir.join("scores.csv");
    let improvement = a.out_dir.join("improvement.csv");
    let cells = a.out_dir.join("cells.json");
    write_file(&scores, result.score_table())?;
    write_file(&improvement, result.improvement_table())?;
    write_file(&cells, to_json(&result))?;
    println!("Mean ± STD negative RCLL\n{}", result.score_table());
    println!("Improvement over mlp (%)\n{}", result.improvement_table());
    Ok(Artifacts {
        manifest: Some(a.out_dir.join("run.json")),
        inputs: vec![a.dataset.clone(), probes::manifest_path(&a.dataset)],
        outputs: vec![scores, improvement, cells],
        seed: Some(a.first_seed),
    })
}

fn sweep_kernel(a: &SweepArgs, threads: usize) -> Result<Artifacts, CliError> {
    let d = read_dataset(&a.dataset)?;
    if a.seeds == 0 || a.kernels.is_empty() || a.kernels.contains(&0) {
        return Err(usage("need at least one seed and positive kernel sizes"));
    }
    let template = encoder_template(EncoderKind::ConvTransformer, d.manifest.lookback, d.manifest.width, &a.model)?;
    let decoder = DecoderConfig {
        hidden: a.model.decoder_hidden.clone(),
    };
    let result = training::kernel_sweep(
        &d,
        &a.kernels,
        a.lookback,
        &seed_list(a.first_seed, a.seeds),
        &template,
        &decoder,
        &train_config(&a.train, a.first_seed)?,
        threads,
    )?;
    let table = a.out_dir.join("kernels.csv");
    let cells = a.out_dir.join("cells.json");
    write_file(&table, result.kernel_table())?;
    write_file(&cells, to_json(&result))?;
    println!("{}", result.kernel_table());
    Ok(Artifacts {
        manifest: Some(a.out_dir.join("run.json")),
        inputs: vec![a.dataset.clone(), probes::manifest_path(&a.dataset)],
        outputs: vec![table, cells],
        seed: Some(a.first_seed),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplainReport {
    pub horizon: f64,
    pub players: Vec<String>,
    pub background: usize,
    pub estimates: Vec<ShapleyEstimate>,
}

fn explain(a: &ExplainArgs, threads: usize) -> Result<Artifacts, CliError> {
    let (model, d) = model_and_data(&a.checkpoint, &a.dataset)?;
    if a.samples == 0 || a.background == 0 {
        return Err(usage("--samples and --background must be positive"));
    }
    let train = split_view(&d, "train", a.val_fraction, a.test_fraction);
    if train.is_empty() {
        return Err(data("the training split is empty"));
    }
    let chosen: Vec<_> = split_view(&d, &a.split, a.val_fraction, a.test_fraction).into_iter().take(a.samples).collect();
    if chosen.is_empty() {
        return Err(data(format!("the {} split is empty", a.split)));
    }
    let horizon = match a.horizon {
        Some(h) if h > 0.0 => h,
        Some(_) => return Err(usage("--horizon must be positive")),
        None => {
            let mut z: Vec<f64> = train.iter().map(|s| s.z).collect();
            z.sort_by(f64::total_cmp);
            z[z.len() / 2]
        }
    };
    let n_bg = a.background.min(train.len());
    let background: Vec<Vec<f64>> = (0..n_bg)
        .map(|k| train[k * train.len() / n_bg].x.iter().map(|v| *v as f64).collect())
        .collect();
    let e = &model.config.encoder;
    let groups = interpret::column_groups(e.lookback, e.features);
    let windows: Vec<Vec<f64>> = chosen.iter().map(|s| s.x.iter().map(|v| *v as f64).collect()).collect();

    let workers = threads.max(1).min(windows.len());
    let mut estimates: Vec<Option<Result<ShapleyEstimate, InterpretError>>> = (0..windows.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunk = windows.len().div_ceil(workers);
        for (w, slots) in estimates.chunks_mut(chunk).enumerate() {
            let (model, background, groups, windows) = (&model, &background, &groups, &windows);
            scope.spawn(move || {
                for (j, slot) in slots.iter_mut().enumerate() {
                    let i = w * chunk + j;
                    let f = interpret::fill_probability_functional(model, horizon);
                    *slot = Some(interpret::shapley_values(f, &windows[i], background, groups, a.permutations, a.seed.wrapping_add(i as u64)));
                }
            });
        }
    });
    let estimates = estimates
        .into_iter()
        .map(|s| s.expect("every window is scored"))
        .collect::<Result<Vec<_>, _>>()?;

    let names = &model.config.feature_names;
    let mut rows = Vec::new();
    for (i, (est, x)) in estimates.iter().zip(&windows).enumerate() {
        rows.extend(interpret::beeswarm_rows(i, names, &est.values, x));
    }
    let beeswarm = a.out_dir.join("beeswarm.csv");
    let values = a.out_dir.join("shapley.json");
    write_file(&beeswarm, interpret::beeswarm_csv(&rows))?;
    let report = ExplainReport {
        horizon,
        players: names.clone(),
        background: background.len(),
        estimates,
    };
    write_file(&values, to_json(&report))?;
    let mut outputs = vec![beeswarm, values];
    if a.heatmaps {
        let record = interpret::attention_heatmaps(&model, &chosen[0].x)?;
        for (h, m) in record.heads.iter().enumerate() {
            let path = a.out_dir.join(format!("heatmap_head{}.csv", h + 1));
            write_file(&path, interpret::heatmap_csv(m))?;
            outputs.push(path);
        }
    }
    let gaps: f64 = report.estimates.iter().map(|e| e.efficiency_gap.abs()).fold(0.0, f64::max);
    println!(
        "{}",
        json!({ "samples": report.estimates.len(), "horizon": horizon, "max_efficiency_gap": gaps, "out_dir": a.out_dir })
    );
    Ok(Artifacts {
        manifest: Some(a.out_dir.join("run.json")),
        inputs: checkpoint_inputs(&a.checkpoint, &a.dataset),
        outputs,
        seed: Some(a.seed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orderbook_names() {
        assert_eq!(orderbook_path(Path::new("d/day1.csv")), PathBuf::from("d/day1_orderbook.csv"));
        assert_eq!(
            orderbook_path(Path::new("AAPL_2012-06-21_34200000_57600000_message_5.csv")),
            PathBuf::from("AAPL_2012-06-21_34200000_57600000_orderbook_5.csv")
        );
        assert_eq!(day_path(Path::new("x/day.csv"), 2, 3), PathBuf::from("x/day_3.csv"));
        assert_eq!(day_path(Path::new("day.csv"), 0, 1), PathBuf::from("day.csv"));
    }

    #[test]
    fn exit_codes_and_diagnostic() {
        let e = CliError::Data("bad\nrow".into());
        assert_eq!(e.exit_code(), 2);
        let line = e.diagnostic();
        assert!(!line.contains('\n'));
        let v: Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["code"], 2);
        assert_eq!(v["error"], "data");
        assert_eq!(CliError::Usage(String::new()).exit_code(), 1);
        assert_eq!(CliError::Numeric(String::new()).exit_code(), 3);
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn config_file_below_flags() {
        let matches = Cli::command().get_matches_from(["lobsurv", "synth", "--seed", "7"]);
        let cli = Cli::from_arg_matches(&matches).unwrap();
        let (_, sub) = matches.subcommand().unwrap();
        let section = json!({ "seed": 3, "days": 4 });
        let Command::Synth(a) = resolve(cli.command, sub, Some(&section)).unwrap() else {
            panic!("wrong command")
        };
        assert_eq!(a.seed, 7);
        assert_eq!(a.days, 4);
        assert_eq!(a.levels, 5);
    }

    #[test]
    fn unknown_config_option_rejected() {
        let matches = Cli::command().get_matches_from(["lobsurv", "synth"]);
        let cli = Cli::from_arg_matches(&matches).unwrap();
        let (_, sub) = matches.subcommand().unwrap();
        let err = resolve(cli.command, sub, Some(&json!({ "sed": 3 }))).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn flattened_options_merge() {
        let matches = Cli::command().get_matches_from(["lobsurv", "fit", "d.csv", "--epochs", "3"]);
        let cli = Cli::from_arg_matches(&matches).unwrap();
        let (_, sub) = matches.subcommand().unwrap();
        let section = json!({ "epochs": 9, "heads": 2, "encoder": "mlp" });
        let Command::Fit(a) = resolve(cli.command, sub, Some(&section)).unwrap() else {
            panic!("wrong command")
        };
        assert_eq!(a.train.epochs, 3);
        assert_eq!(a.model.heads, 2);
        assert_eq!(a.encoder, "mlp");
    }

    #[test]
    fn command_serializes_with_name() {
        let c = Command::Km(KmArgs {
            dataset: "d.csv".into(),
            out: "k.csv".into(),
        });
        let v = serde_json::to_value(&c).unwrap();
        assert_eq!(v["command"], "km");
        let back: Command = serde_json::from_value(v).unwrap();
        assert_eq!(back, c);
    }
}
