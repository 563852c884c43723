use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use tapudd::ensemble::{Strategy, DEFAULT_N_E, DEFAULT_TRIM};

#[derive(Debug, Parser)]
#[command(name = "tapudd", version, about = "Post-hoc, task-agnostic OOD scoring on feature matrices")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "subcommand")]
pub enum Command {
    /// Generate a synthetic data set or an OOD probe set.
    Synth(SynthArgs),
    /// Fit a detector and save it as a model archive.
    Fit(FitArgs),
    /// Score every row of a feature file.
    Score(ScoreArgs),
    /// Compare ID and OOD score files.
    Eval(EvalArgs),
    /// Export a 2-D score landscape.
    Landscape(LandscapeArgs),
    /// Re-run the command recorded in a run manifest.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Fit(_) => "fit",
            Command::Score(_) => "score",
            Command::Eval(_) => "eval",
            Command::Landscape(_) => "landscape",
            Command::Replay(_) => "replay",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskArg {
    Binary,
    Multiclass,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodArg {
    Far,
    Near,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub task: TaskArg,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Emit an OOD probe set instead of the in-distribution data.
    #[arg(long, value_enum)]
    pub ood: Option<OodArg>,
    /// Number of probes (default 1000 far, 50 near) or, without --ood,
    /// samples per cluster.
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Tapudd,
    Tapmb,
    Tapmos,
    #[value(name = "tied-mb")]
    TiedMb,
    Kl,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct FitArgs {
    #[arg(long, value_enum, default_value = "tapudd")]
    pub method: Method,
    #[arg(long)]
    pub features: PathBuf,
    /// Cluster count for tapmb and tapmos.
    #[arg(long)]
    pub k: Option<usize>,
    /// Cluster counts of the tapudd ensemble [default: 1,2,3,4,5,6,7,8,9,10,16,32]
    #[arg(long, value_delimiter = ',')]
    pub k_list: Option<Vec<usize>>,
    #[arg(long, value_parser = parse_strategy, default_value = "average")]
    pub strategy: Strategy,
    #[arg(long, default_value_t = DEFAULT_N_E)]
    pub n_e: usize,
    #[arg(long, default_value_t = DEFAULT_TRIM)]
    pub m: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct ScoreArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Re-aggregate a tapudd ensemble with another strategy.
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<Strategy>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricArg {
    Auroc,
    Aupr,
    Fpr95,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatArg {
    Table,
    Csv,
    Json,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub id_scores: PathBuf,
    #[arg(long)]
    pub ood_scores: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "auroc,aupr,fpr95")]
    pub metrics: Vec<MetricArg>,
    #[arg(long, value_enum, default_value = "table")]
    pub format: FormatArg,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct LandscapeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    pub xmin: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub xmax: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub ymin: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub ymax: f64,
    /// Cells per axis.
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(2..))]
    pub res: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write the primary output here instead of the recorded path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: tapudd::Error| e.to_string())
}
