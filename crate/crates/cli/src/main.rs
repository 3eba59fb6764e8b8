//! `rmsim`: phantom generation, training, prediction, augmentation,
//! evaluation and trace tools.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numerical
//! failure, 3 IO or corruption. `RMSIM_THREADS` caps the worker pool.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "rmsim", version, about = "Breathing-trace conditioned respiratory motion simulation")]
struct Cli {
    /// Seed for every random choice; overrides seeds in spec/config files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print a JSON summary of the run on standard output.
    #[arg(long, global = true)]
    print_summary: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic breathing phantom sequence.
    Phantom(PhantomArgs),
    /// Train a model on phantom sequence directories.
    Train(TrainArgs),
    /// Predict future phases of a static volume under a breathing trace.
    Predict(PredictArgs),
    /// Emit synthetic phases for every case in a manifest.
    Augment(AugmentArgs),
    /// Score predicted phases against a truth sequence.
    Evaluate(EvaluateArgs),
    /// Breathing trace tools.
    #[command(subcommand)]
    Trace(TraceCommand),
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    /// Phantom spec JSON; built-in defaults when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Peak apex displacement (mm); overrides the spec.
    #[arg(long)]
    amplitude: Option<f64>,
    /// Number of phases; overrides the spec.
    #[arg(long)]
    phases: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON with optional `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Phantom sequence directories.
    #[arg(long, num_args = 1.., required = true)]
    data: Vec<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Loss log CSV; defaults to `<out>.log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    phases: Option<usize>,
    #[arg(long)]
    smoothness_weight: Option<f64>,
    /// Write `epoch_<n>.ckpt` next to the checkpoint every this many epochs.
    #[arg(long)]
    checkpoint_interval: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Static volume (.mhd).
    #[arg(long)]
    input: PathBuf,
    /// Breathing trace CSV.
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Multiply the trace by this factor before predicting.
    #[arg(long, default_value_t = 1.0)]
    trace_scale: f64,
    /// Label mask to propagate with the predicted fields.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Landmark CSV to propagate with the predicted fields.
    #[arg(long)]
    landmarks: Option<PathBuf>,
    /// Voxel `i,j,k` around which to report mean |dz|.
    #[arg(long, value_delimiter = ',')]
    apex: Option<Vec<usize>>,
    #[arg(long, default_value_t = 2.0)]
    apex_radius: f64,
    /// Resample inputs to the model grid instead of failing on a mismatch.
    #[arg(long)]
    resample: bool,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    #[arg(long)]
    model: PathBuf,
    /// JSON manifest of static cases.
    #[arg(long)]
    cases: PathBuf,
    /// Directory of trace CSVs forming the pool.
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resample: bool,
    /// Refuse checkpoints that were never trained.
    #[arg(long)]
    require_trained: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Directory with `phase_<t>.mhd` (t >= 1) and `dvf_<t>` fields.
    #[arg(long)]
    pred: PathBuf,
    /// Truth sequence directory; `phase_0.mhd` is the static baseline.
    #[arg(long)]
    truth: PathBuf,
    /// Report landmark TRE.
    #[arg(long)]
    landmarks: bool,
    /// Report mask Dice.
    #[arg(long)]
    masks: bool,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum TraceCommand {
    /// Recover a trace from a directory of `dvf_<t>` fields.
    Extract {
        #[arg(long)]
        dvfs: PathBuf,
        /// Lung mask of the reference phase.
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Multiply every sample of a trace by a factor.
    Rescale {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        factor: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<rmsim::Error>()) {
        Some(e) if e.is_numerical() => 2,
        Some(e) if e.is_io() => 3,
        Some(_) => 1,
        None if err.chain().any(|e| e.is::<std::io::Error>()) => 3,
        None => 1,
    }
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("RMSIM_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| anyhow::anyhow!("RMSIM_THREADS must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let run = || -> anyhow::Result<serde_json::Value> {
        configure_threads()?;
        match &cli.command {
            Command::Phantom(a) => commands::phantom(a, cli.seed),
            Command::Train(a) => commands::train(a, cli.seed),
            Command::Predict(a) => commands::predict(a),
            Command::Augment(a) => commands::augment(a, cli.seed),
            Command::Evaluate(a) => commands::evaluate(a),
            Command::Trace(t) => commands::trace(t),
        }
    };
    match run() {
        Ok(summary) => {
            if cli.print_summary {
                println!("{}", serde_json::to_string_pretty(&summary).expect("summary serialises"));
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
