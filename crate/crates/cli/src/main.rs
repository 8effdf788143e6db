// `!(x > y)` comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{EndpointArgs, FileConfig, GrpoArgs, Overrides, RewardArgs, RunConfig, SamplerArgs};
use framereward::gateway::GatewayError;

/// Frame-level structural distortion rewards, benchmarks and tooling.
///
/// Exit codes: 0 success, 2 input or validation error, 3 endpoint error.
#[derive(Debug, Parser)]
#[command(name = "framereward", version)]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for parallel stages and in-flight scorer requests.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Composite rewards for index-matched rollouts of frame pairs.
    Reward(RewardCmd),
    /// Benchmark metrics.
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Two-stage frame sampling.
    #[command(subcommand)]
    Sample(SampleCmd),
    /// Policy optimization on the toy policy.
    #[command(subcommand)]
    Grpo(GrpoCmd),
    /// Dataset utilities.
    #[command(subcommand)]
    Data(DataCmd),
    /// Send frames to a scorer endpoint (or the mock) and save raw responses.
    Score(ScoreCmd),
}

#[derive(Debug, Args)]
pub struct RewardCmd {
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub rollouts: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Where to write the run report (stdout if omitted).
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub weights: RewardArgs,
    #[arg(long)]
    pub std_floor: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum BenchCmd {
    /// Pairwise preference accuracy with and without ties.
    Pref(BenchPrefCmd),
    /// Distorted/normal recognition precision, recall and F1.
    Frames(BenchFramesCmd),
}

#[derive(Debug, Args)]
pub struct BenchPrefCmd {
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub tie_threshold: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchFramesCmd {
    #[arg(long)]
    pub frames: PathBuf,
    /// Frame predictions, either labels/rating records or raw scorer output.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum SampleCmd {
    /// Plan stage-2 frames from stage-1 scores.
    Plan(SamplePlanCmd),
}

#[derive(Debug, Args)]
pub struct SamplePlanCmd {
    /// JSON file `{"scores": {"<frame index>": score}}`.
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub video_id: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum GrpoCmd {
    /// Train the toy policy and write per-step statistics.
    Demo(GrpoDemoCmd),
}

#[derive(Debug, Args)]
pub struct GrpoDemoCmd {
    /// Per-step statistics (JSONL).
    #[arg(long)]
    pub out: PathBuf,
    /// Train on these pairs instead of the synthetic always-A-wins set.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub grpo: GrpoArgs,
    #[command(flatten)]
    pub weights: RewardArgs,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum DataCmd {
    /// Draw a pseudo point-wise score per frame from its label count.
    PseudoScore(PseudoScoreCmd),
    /// Keep reasoning samples whose labels and regions match ground truth.
    FilterCot(FilterCotCmd),
    /// Validate JSONL files and report every problem.
    Validate(ValidateCmd),
}

#[derive(Debug, Args)]
pub struct PseudoScoreCmd {
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FilterCotCmd {
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long)]
    pub candidates: PathBuf,
    /// Kept candidates (JSONL).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iou_threshold: Option<f64>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateCmd {
    #[arg(long)]
    pub pairs: Vec<PathBuf>,
    #[arg(long)]
    pub frames: Vec<PathBuf>,
    #[arg(long)]
    pub pair_predictions: Vec<PathBuf>,
    #[arg(long)]
    pub frame_predictions: Vec<PathBuf>,
    #[arg(long)]
    pub rollouts: Vec<PathBuf>,
    #[arg(long)]
    pub candidates: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreCmd {
    #[arg(long)]
    pub frames: PathBuf,
    /// Raw responses (JSONL), one record per sample.
    #[arg(long)]
    pub out: PathBuf,
    /// Use the mock scorer with this frames file as its answer key.
    #[arg(long)]
    pub mock: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub endpoint: EndpointArgs,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn overrides(command: &Command) -> (&'static str, Overrides) {
    let mut o = Overrides::default();
    let name = match command {
        Command::Reward(c) => {
            o.reward = c.weights.clone();
            o.grpo.std_floor = c.std_floor;
            "reward"
        }
        Command::Bench(BenchCmd::Pref(c)) => {
            o.tie_threshold = c.tie_threshold;
            "bench pref"
        }
        Command::Bench(BenchCmd::Frames(_)) => "bench frames",
        Command::Sample(SampleCmd::Plan(c)) => {
            o.seed = c.seed;
            o.sampler = c.sampler.clone();
            "sample plan"
        }
        Command::Grpo(GrpoCmd::Demo(c)) => {
            o.seed = c.seed;
            o.grpo = c.grpo.clone();
            o.reward = c.weights.clone();
            "grpo demo"
        }
        Command::Data(DataCmd::PseudoScore(c)) => {
            o.seed = c.seed;
            "data pseudo-score"
        }
        Command::Data(DataCmd::FilterCot(c)) => {
            o.iou_threshold = c.iou_threshold;
            "data filter-cot"
        }
        Command::Data(DataCmd::Validate(_)) => "data validate",
        Command::Score(c) => {
            o.seed = c.seed;
            o.endpoint = c.endpoint.clone();
            "score"
        }
    };
    (name, o)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let jobs = cli.jobs.or(file.jobs);
    if let Some(n) = jobs {
        anyhow::ensure!(n >= 1, "jobs must be at least 1");
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    let (name, o) = overrides(&cli.command);
    let cfg = RunConfig::resolve(name, &file, &o)?;
    match &cli.command {
        Command::Reward(c) => commands::reward(c, &cfg),
        Command::Bench(BenchCmd::Pref(c)) => commands::bench_pref(c, &cfg),
        Command::Bench(BenchCmd::Frames(c)) => commands::bench_frames(c, &cfg),
        Command::Sample(SampleCmd::Plan(c)) => commands::sample_plan(c, &cfg),
        Command::Grpo(GrpoCmd::Demo(c)) => commands::grpo_demo(c, &cfg),
        Command::Data(DataCmd::PseudoScore(c)) => commands::pseudo_score(c, &cfg),
        Command::Data(DataCmd::FilterCot(c)) => commands::filter_cot(c, &cfg),
        Command::Data(DataCmd::Validate(c)) => commands::validate(c),
        Command::Score(c) => commands::score(c, &cfg, jobs),
    }
}

fn is_endpoint_failure(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        matches!(
            e.downcast_ref::<GatewayError>(),
            Some(
                GatewayError::Timeout { .. }
                    | GatewayError::EndpointError { .. }
                    | GatewayError::RetriesExhausted { .. }
                    | GatewayError::Config(_)
            )
        )
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_endpoint_failure(&err) {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
