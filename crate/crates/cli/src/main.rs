//! `tokprobe`: build probing tasks, probe token stores and report binding
//! and entanglement measures.

mod commands;
mod run_manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tokprobe::select::Strategy;

/// Raised for argument combinations clap cannot check on its own.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "tokprobe", version, about = "Probe object binding and entanglement in vision-encoder token spaces")]
pub struct Cli {
    /// Directory that relative input paths are resolved against.
    #[arg(long, global = true, env = "TOKPROBE_DATA_DIR")]
    pub data_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build paired and global task files from COCO annotations.
    BuildTasks(BuildTasksArgs),
    /// Write a synthetic token store with known binding and leakage.
    Synth(SynthArgs),
    /// Probe a paired task over the layers of a store.
    ProbePaired(ProbePairedArgs),
    /// Probe the many-class global task with a caption-mention breakdown.
    ProbeGlobal(ProbeGlobalArgs),
    /// Compute M1 and M2 per model and layer from accuracy tables.
    Measures(MeasuresArgs),
    /// Print the recommended layer of each model in a measures file.
    Recommend(RecommendArgs),
    /// Cosine similarity of one token to all tokens of an image.
    Simmap(SimmapArgs),
    /// Collect tables and measures into one report.
    Report(ReportArgs),
    /// Check layer files or store directories for structural errors.
    ValidateStore(ValidateStoreArgs),
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    /// Layers to probe (default: every layer of the first store).
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<u32>,
    /// Seed for random token choice and probe training.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Patch coverage needed for a token to belong to an object.
    #[arg(long, default_value_t = tokprobe::select::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Worker threads (default: one per core).
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Args, Debug)]
pub struct BuildTasksArgs {
    /// Instance annotations the paired tasks and global training samples come from.
    #[arg(long)]
    pub instances: PathBuf,
    /// Caption annotations matching `--instances`.
    #[arg(long)]
    pub captions: Option<PathBuf>,
    /// Instance annotations for global test samples.
    #[arg(long)]
    pub val_instances: Option<PathBuf>,
    #[arg(long)]
    pub val_captions: Option<PathBuf>,
    /// Task configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Extra caption words per category (TOML).
    #[arg(long)]
    pub synonyms: Option<PathBuf>,
    /// Override every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "synthetic")]
    pub model: String,
    #[arg(long, default_value_t = 800)]
    pub images: usize,
    #[arg(long, default_value_t = 8)]
    pub grid_h: usize,
    #[arg(long, default_value_t = 8)]
    pub grid_w: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 2)]
    pub primary: usize,
    #[arg(long, default_value_t = 4)]
    pub secondary: usize,
    #[arg(long, default_value_t = 1.0)]
    pub signal: f64,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// One layer per value: the share of the other object's direction in object tokens.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub leakage: Vec<f64>,
    /// Leave out the CLS vector.
    #[arg(long)]
    pub no_cls: bool,
    /// Pixel size of one token in the generated annotations.
    #[arg(long, default_value_t = 4)]
    pub patch_px: usize,
}

#[derive(Args, Debug)]
pub struct ProbePairedArgs {
    #[arg(long)]
    pub task: PathBuf,
    /// Store directories holding the task's images (repeatable).
    #[arg(long, required = true)]
    pub store: Vec<PathBuf>,
    /// Instance annotations for object masks (repeatable).
    #[arg(long, required = true)]
    pub instances: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "CLS,AVG_OBJ,RANDOM_OBJ,RANDOM")]
    pub strategies: Vec<Strategy>,
    #[command(flatten)]
    pub probe: ProbeArgs,
    /// Accuracy table (`.json` or tab-separated).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ProbeGlobalArgs {
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long, required = true)]
    pub store: Vec<PathBuf>,
    #[arg(long, required = true)]
    pub instances: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "AVG_OBJ,RANDOM_OBJ")]
    pub strategies: Vec<Strategy>,
    /// Caption-mention subsets with fewer test samples are reported absent.
    #[arg(long, default_value_t = 400)]
    pub min_subset: usize,
    #[command(flatten)]
    pub probe: ProbeArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct MeasuresArgs {
    /// Accuracy tables; tables of one model are averaged over tasks.
    #[arg(long, required = true, num_args = 1..)]
    pub tables: Vec<PathBuf>,
    #[arg(long, default_value = "AVG_OBJ")]
    pub strategy: Strategy,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RecommendArgs {
    #[arg(long)]
    pub measures: PathBuf,
    #[arg(long, default_value_t = tokprobe::measures::DEFAULT_TIE_WINDOW)]
    pub tie_window: f64,
}

#[derive(Args, Debug)]
pub struct SimmapArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub layer: u32,
    #[arg(long)]
    pub image: u64,
    /// Anchor token as `row,col`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub anchor: Vec<usize>,
    /// Output file (default: standard output).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long, num_args = 1..)]
    pub tables: Vec<PathBuf>,
    /// Global-task tables, used for per-model correlations.
    #[arg(long, num_args = 1..)]
    pub global: Vec<PathBuf>,
    /// Precomputed measures (default: computed from `--tables`).
    #[arg(long)]
    pub measures: Option<PathBuf>,
    #[arg(long, default_value = "AVG_OBJ")]
    pub strategy: Strategy,
    #[arg(long, default_value_t = tokprobe::measures::DEFAULT_TIE_WINDOW)]
    pub tie_window: f64,
    /// Report file (`.json` or tab-separated).
    #[arg(long)]
    pub out: PathBuf,
    /// Per-layer accuracy curves for plotting.
    #[arg(long)]
    pub curves: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ValidateStoreArgs {
    /// Layer files or store directories.
    #[arg(required = true)]
    pub paths: Vec<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
