mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use planesac_core::eval::ReportFormat;
use planesac_core::hypo::Fusion;
use planesac_core::pipeline::Method;

/// Relative pose from plane correspondences on synthetic two-view scenes.
#[derive(Debug, Parser)]
#[command(name = "planesac", version)]
struct Cli {
    /// Worker threads for scene-level parallelism. Results do not depend on it.
    #[arg(long, global = true, env = "PLANESAC_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene file.
    Gen(GenArgs),
    /// Train the hypothesis model (AIM stage, matcher calibration, refiner stage).
    Train(TrainArgs),
    /// Estimate poses with a method and write a summary report.
    Estimate(EstimateArgs),
    /// Run the classical baselines and the initial pose.
    Baseline(BaselineArgs),
    /// Sweep matching thresholds or plane noise levels.
    Sweep(SweepArgs),
    /// Finite-difference check of every backward pass.
    Gradcheck(GradcheckArgs),
    /// Combine JSON reports into one table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// TOML file with scene configuration keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    scenes: Option<usize>,
    /// Plane offset noise (m).
    #[arg(long)]
    offset_noise: Option<f64>,
    /// Plane normal noise (degrees).
    #[arg(long)]
    normal_noise_deg: Option<f64>,
    #[arg(long)]
    outlier_rate: Option<f64>,
    #[arg(long)]
    distractors: Option<usize>,
    #[arg(long)]
    init_rotation_sigma_deg: Option<f64>,
    #[arg(long)]
    init_translation_sigma: Option<f64>,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ArchChoice {
    Full,
    Compact,
    Tiny,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML file with training configuration keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    architecture: Option<ArchChoice>,
    #[arg(long)]
    aim_steps: Option<usize>,
    #[arg(long)]
    refine_steps: Option<usize>,
    /// Checkpoint to write.
    #[arg(long, short)]
    out: PathBuf,
    /// CSV training log; appended to when resuming.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Checkpoint to continue from. Must come from the same configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many steps of this invocation.
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatChoice {
    Csv,
    Json,
}

impl From<FormatChoice> for ReportFormat {
    fn from(f: FormatChoice) -> Self {
        match f {
            FormatChoice::Csv => ReportFormat::Csv,
            FormatChoice::Json => ReportFormat::Json,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodChoice {
    NopeSac,
    HomoRef,
    #[value(name = "nume-ref1")]
    NumeRef1,
    #[value(name = "nume-ref2")]
    NumeRef2,
    InitOnly,
}

impl From<MethodChoice> for Method {
    fn from(m: MethodChoice) -> Self {
        match m {
            MethodChoice::NopeSac => Method::NopeSac,
            MethodChoice::HomoRef => Method::HomoRef,
            MethodChoice::NumeRef1 => Method::NumeRef1,
            MethodChoice::NumeRef2 => Method::NumeRef2,
            MethodChoice::InitOnly => Method::InitOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FusionChoice {
    Soft,
    Avg,
    MinCost,
    MaxScore,
}

impl From<FusionChoice> for Fusion {
    fn from(f: FusionChoice) -> Self {
        match f {
            FusionChoice::Soft => Fusion::Soft,
            FusionChoice::Avg => Fusion::Avg,
            FusionChoice::MinCost => Fusion::MinCost,
            FusionChoice::MaxScore => Fusion::MaxScore,
        }
    }
}

#[derive(Debug, Args)]
struct EstimateShared {
    /// TOML file with estimation keys (method, fusion, threshold, ...).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Trained checkpoint; also supplies the calibrated dustbin score.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Matching threshold on the soft assignment.
    #[arg(long)]
    threshold: Option<f64>,
    /// Dustbin score; overrides the checkpoint's calibrated value.
    #[arg(long, allow_negative_numbers = true)]
    bin_score: Option<f64>,
    /// Report file.
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatChoice,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[command(flatten)]
    shared: EstimateShared,
    #[arg(long, value_enum)]
    method: Option<MethodChoice>,
    #[arg(long, value_enum)]
    fusion: Option<FusionChoice>,
    /// Per-scene poses, errors and matches as JSON.
    #[arg(long)]
    per_scene: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    #[command(flatten)]
    shared: EstimateShared,
    /// Baselines to run; all of them when omitted.
    #[arg(long, value_enum)]
    method: Vec<MethodChoice>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GridChoice {
    Threshold,
    Noise,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    shared: EstimateShared,
    #[arg(long, value_enum)]
    grid: GridChoice,
    #[arg(long, value_enum)]
    method: Option<MethodChoice>,
    #[arg(long, value_enum)]
    fusion: Option<FusionChoice>,
    /// Thresholds for the threshold grid.
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    instances: usize,
    /// Deliberately break one suite's gradient (negative control).
    #[arg(long, hide = true)]
    corrupt: Option<String>,
    /// Write the suite results as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// JSON reports written by estimate, baseline or sweep.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatChoice,
}

/// Failure classes with stable exit codes.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments or configuration (exit 1).
    Invalid(String),
    /// Anything that went wrong while running (exit 2).
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Estimate(a) => commands::estimate(a),
        Command::Baseline(a) => commands::baseline(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Invalid(m) => eprintln!("error: {m}"),
                Failure::Runtime(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
