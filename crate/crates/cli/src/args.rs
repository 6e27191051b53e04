//! Command-line flags and `--config` merging.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use siamfuse::model::DEFAULT_LAYER_DIMS;
use siamfuse::{Gain, LossKind, SynthConfig};

use crate::experiment::Views;

#[derive(Debug, Parser)]
#[command(
    name = "siamfuse",
    version,
    about = "Siamese metric learning over fused image features"
)]
pub struct Cli {
    /// key=value file whose entries act as flags; command-line flags win.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a planted-similarity corpus (features, regions, relevance).
    Synth(SynthArgs),
    /// Train one model per query fold.
    Train(TrainArgs),
    /// Score trained fold models and write nDCG reports.
    Eval(EvalArgs),
    /// Print one query's references in ascending distance.
    Rank(RankArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50, value_parser = positive)]
    pub n_queries: usize,
    #[arg(long, default_value_t = 180, value_parser = positive)]
    pub refs_per_query: usize,
    #[arg(long, default_value_t = 512, value_parser = positive)]
    pub dim_a: usize,
    #[arg(long, default_value_t = 512, value_parser = positive)]
    pub dim_b: usize,
    /// Number of latent clusters.
    #[arg(long, default_value_t = 10, value_parser = positive)]
    pub clusters: usize,
    /// Per-coordinate noise standard deviation.
    #[arg(long, default_value_t = SynthConfig::default().noise_sigma)]
    pub noise: f64,
    #[arg(long, default_value_t = 6, value_parser = positive)]
    pub regions_per_image: usize,
    /// Regions per image drawn around the image's own cluster.
    #[arg(long, default_value_t = 5, value_parser = positive)]
    pub signal_regions: usize,
    /// Grade adjacent clusters 0 instead of 2.
    #[arg(long)]
    pub no_ring: bool,
}

impl SynthArgs {
    pub fn config(&self) -> SynthConfig {
        SynthConfig {
            n_queries: self.n_queries,
            refs_per_query: self.refs_per_query,
            dim_a: self.dim_a,
            dim_b: self.dim_b,
            n_latent_clusters: self.clusters,
            noise_sigma: self.noise,
            seed: self.seed,
            regions_per_image: self.regions_per_image,
            signal_regions: self.signal_regions,
            ring_grading: !self.no_ring,
        }
    }
}

/// Input files shared by `train`, `eval` and `rank`.
#[derive(Debug, Args)]
pub struct DataArgs {
    /// Whole-image feature table.
    #[arg(long, value_name = "PATH")]
    pub fic: PathBuf,
    /// Region feature table.
    #[arg(long, value_name = "PATH")]
    pub regions: PathBuf,
    /// Relevance judgments.
    #[arg(long, value_name = "PATH")]
    pub rel: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for checkpoints, histories and the fold assignment.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Top-priority regions averaged per image.
    #[arg(long, default_value_t = 5, value_parser = positive)]
    pub k: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 1.0)]
    pub margin: f64,
    #[arg(long, default_value_t = 64, value_parser = positive)]
    pub batch: usize,
    #[arg(long, default_value_t = LossKind::Modified)]
    pub loss: LossKind,
    /// Output units per layer, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = positive, default_values_t = DEFAULT_LAYER_DIMS)]
    pub layers: Vec<usize>,
    /// Feature views fed to the network.
    #[arg(long, default_value_t = Views::Both)]
    pub views: Views,
    /// Divide grades by 3 inside the loss.
    #[arg(long)]
    pub scale_grades: bool,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Directory written by `train`.
    #[arg(long, value_name = "DIR")]
    pub models: PathBuf,
    /// Directory for the report CSVs.
    #[arg(long)]
    pub out: PathBuf,
    /// Rank cutoffs, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = positive, default_values_t = [5, 10, 20, 30])]
    pub ks: Vec<usize>,
    /// Also score raw fused features.
    #[arg(long)]
    pub baseline: bool,
    #[arg(long, default_value_t = Gain::Exponential)]
    pub gain: Gain,
    /// Must match the region count the models were trained with.
    #[arg(long, value_parser = positive)]
    pub k: Option<usize>,
    /// Accepted for symmetry with `train`; evaluation draws nothing at random.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct RankArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Query image id.
    #[arg(long)]
    pub query: String,
    /// Checkpoint whose embeddings define the distance.
    #[arg(
        long,
        value_name = "PATH",
        required_unless_present = "raw",
        conflicts_with = "raw"
    )]
    pub model: Option<PathBuf>,
    /// Rank by raw input features instead of embeddings.
    #[arg(long)]
    pub raw: bool,
    /// Top-priority regions averaged per image (raw ranking only).
    #[arg(long, default_value_t = 5, value_parser = positive)]
    pub k: usize,
    /// Feature views used for raw ranking.
    #[arg(long, default_value_t = Views::Both)]
    pub views: Views,
    /// Write rows to this file instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 10, value_parser = positive)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
    /// Perturb the analytic gradient; the check must then fail.
    #[arg(long, hide = true)]
    pub corrupt: bool,
    /// Write the summary to this file as well as standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

/// Turns `key=value` lines into flags. Blank lines and `#` comments are
/// skipped; `true` and `false` switch boolean flags on or off.
pub fn config_args(text: &str) -> Result<Vec<OsString>> {
    let mut args = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("config line {}: expected key=value, got `{line}`", i + 1);
        };
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        let value = value.trim();
        if key.is_empty() {
            bail!("config line {}: empty key", i + 1);
        }
        if key == "config" {
            bail!(
                "config line {}: nested config files are not supported",
                i + 1
            );
        }
        match value {
            "true" => args.push(format!("--{key}").into()),
            "false" => {}
            _ => args.push(format!("--{key}={value}").into()),
        }
    }
    Ok(args)
}

/// Removes `--config PATH` from `argv` and splices the file's flags in
/// right after the subcommand, so later command-line flags override them.
pub fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut path = None;
    let mut iter = argv.into_iter();
    while let Some(arg) = iter.next() {
        let s = arg.to_string_lossy();
        if s == "--" {
            rest.push(arg);
            rest.extend(iter.by_ref());
            break;
        }
        if s == "--config" {
            match iter.next() {
                Some(p) => path = Some(PathBuf::from(p)),
                // Leave it for clap to report the missing value.
                None => rest.push(arg),
            }
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        } else {
            rest.push(arg);
        }
    }
    let Some(path) = path else {
        return Ok(rest);
    };
    let text =
        fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display()))?;
    let extra = config_args(&text)?;
    let at = rest
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
        .map_or(rest.len(), |p| p + 2);
    rest.splice(at..at, extra);
    Ok(rest)
}
