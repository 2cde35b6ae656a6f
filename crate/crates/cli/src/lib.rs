//! Command-line front end for training teachers, distilling students and
//! running the ablation and λ grids.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use reviewkd::review::AblationMode;

pub mod commands;
pub mod report;
pub mod runs;

/// An invocation that can never succeed as written. Maps to exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// 2 for usage errors, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.downcast_ref::<UsageError>().is_some()) {
        2
    } else {
        1
    }
}

#[derive(Debug, Parser)]
#[command(name = "reviewkd", version, about = "Knowledge-review distillation for CIFAR ResNets")]
pub struct Cli {
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a teacher (or a CE-only baseline student) with cross-entropy.
    TrainTeacher(TrainTeacherArgs),
    /// Distill a student from a teacher checkpoint.
    Distill(DistillArgs),
    /// Run the six-mode component grid over several seeds.
    Ablate(AblateArgs),
    /// One distillation run per λ and seed.
    SweepLambda(SweepArgs),
    /// Finite-difference check of every kernel and review module in f64.
    Gradcheck(GradcheckArgs),
    /// Aggregate finished runs into mean ± std tables.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// 240 epochs on the full training split (cifar100 by default).
    Full,
    /// 40 epochs on a 10k-image cifar10 subset.
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    Cifar10,
    Cifar100,
    /// Generated images; no files needed.
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Default)]
pub enum PrecisionArg {
    #[default]
    F32,
    F64,
}

/// Dataset, recipe and output options shared by every training command.
#[derive(Debug, Clone, Args)]
pub struct RecipeArgs {
    #[arg(long, value_enum, default_value_t = Preset::Full)]
    pub preset: Preset,
    /// Defaults to cifar100 for the full preset and cifar10 for desk.
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetKind>,
    /// Directory holding the binary CIFAR files.
    #[arg(long, env = "REVIEWKD_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    /// Class-balanced training subset (desk default 10000; synthetic default 512).
    #[arg(long)]
    pub subset: Option<usize>,
    /// Class-balanced test subset (synthetic default 256).
    #[arg(long)]
    pub test_subset: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Base learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Epochs at which the learning rate is multiplied by --decay-factor.
    #[arg(long, value_delimiter = ',')]
    pub decay_epochs: Option<Vec<usize>>,
    #[arg(long)]
    pub decay_factor: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Classical momentum instead of Nesterov.
    #[arg(long)]
    pub no_nesterov: bool,
    /// Disable random crops and flips.
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long, value_enum, default_value_t)]
    pub precision: PrecisionArg,
    /// Run directory (single runs) or parent directory (grids).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Reuse existing run directories; finished runs are skipped.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainTeacherArgs {
    /// Architecture, e.g. resnet56, resnet32x4, wrn40-2.
    #[arg(long)]
    pub model: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    pub recipe: RecipeArgs,
}

/// Options for the review loss shared by the distillation commands.
#[derive(Debug, Clone, Args)]
pub struct ReviewArgs {
    /// Teacher checkpoint written by train-teacher.
    #[arg(long)]
    pub teacher: PathBuf,
    /// Student architecture, e.g. resnet20.
    #[arg(long)]
    pub student: String,
    /// Pyramid levels, e.g. h,4,2,1.
    #[arg(long)]
    pub hcl_levels: Option<String>,
    /// Level weights, e.g. 1,0.5,0.25,0.125.
    #[arg(long)]
    pub hcl_weights: Option<String>,
    /// Do not divide the HCL sum by the total weight.
    #[arg(long)]
    pub hcl_unnormalized: bool,
    /// Channel width m of the fusion units.
    #[arg(long)]
    pub mid_channels: Option<usize>,
    /// Length of the linear λ ramp (default: 20 epochs scaled to the recipe).
    #[arg(long, conflicts_with = "no_warmup")]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub no_warmup: bool,
    /// Train on the distillation term alone.
    #[arg(long)]
    pub no_ce: bool,
    #[command(flatten)]
    pub recipe: RecipeArgs,
}

#[derive(Debug, Clone, Args)]
pub struct DistillArgs {
    /// Review loss weight (default depends on the teacher/student pair).
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    #[arg(long, value_parser = parse_mode, default_value = "full")]
    pub mode: AblationMode,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    pub review: ReviewArgs,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    /// Subset of modes (default: all six).
    #[arg(long, value_parser = parse_mode, value_delimiter = ',')]
    pub modes: Option<Vec<AblationMode>>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub review: ReviewArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    /// Comma separated λ values, e.g. 0.1,0.5,0.7,1.0,5.0.
    #[arg(long, allow_hyphen_values = true)]
    pub lambdas: String,
    #[arg(long, value_parser = parse_mode, default_value = "full")]
    pub mode: AblationMode,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub review: ReviewArgs,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Run directories, grid directories or record.csv files.
    pub inputs: Vec<PathBuf>,
    /// Also write the grouped table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<AblationMode, String> {
    s.parse().map_err(|e: reviewkd::Error| e.to_string())
}

/// Parse `args` (including the program name), run the command and return
/// the process exit code.
pub fn main_with<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_logging(&cli);
    match commands::execute_command(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn init_logging(cli: &Cli) {
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_secs()
        .try_init();
}
