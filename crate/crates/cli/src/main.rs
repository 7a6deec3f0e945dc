use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use polartensor::data::Split;
use polartensor::Error;

mod commands;

#[derive(Parser)]
#[command(name = "polartensor", version, about = "Equivariant polarizability tensor models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration file with [model] and [train] sections.
    #[arg(long)]
    config: PathBuf,
    /// `section.key=value` override, repeatable; wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a molecule-level train/val/test manifest for a dataset.
    Split {
        dataset: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, value_delimiter = ',', default_value = "0.8,0.1,0.1")]
        fractions: Vec<f64>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset labelled by the analytic teacher.
    Synth {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Include the environment anisotropy term in the teacher.
        #[arg(long)]
        environment: bool,
        /// Output path; `.jsonl` selects JSON lines, anything else extended XYZ.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train a model; writes best.ckpt, last.ckpt and train_log.jsonl.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, env = "PTENSOR_OUT_DIR", default_value = "runs/latest")]
        out: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `train.workers`.
        #[arg(long, env = "PTENSOR_WORKERS")]
        workers: Option<usize>,
        /// Continue from a checkpoint with training state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compute test metrics and the size-binned deviatoric report.
    Eval {
        #[command(flatten)]
        input: EvalInput,
        #[arg(long, env = "PTENSOR_OUT_DIR", default_value = "runs/latest")]
        out: PathBuf,
    },
    /// Measure rotational equivariance over sampled rotations.
    Equivcheck {
        #[command(flatten)]
        input: EvalInput,
        #[arg(long, default_value_t = 64)]
        rotations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Replace every sampled rotation by the identity.
        #[arg(long, hide = true)]
        identity_rotations: bool,
        #[arg(long, env = "PTENSOR_OUT_DIR", default_value = "runs/latest")]
        out: PathBuf,
    },
    /// Print the predicted tensor and its decomposition for each frame.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        xyz: PathBuf,
    },
}

#[derive(Args)]
struct EvalInput {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
}

fn exit_code(e: &Error) -> u8 {
    if e.is_input_error() {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Split { dataset, seed, fractions, out } => commands::split(&dataset, seed, &fractions, &out),
        Command::Synth { n, seed, environment, out } => commands::synth(n, seed, environment, &out),
        Command::Train { config, data, manifest, out, seed, workers, resume } => commands::train(commands::TrainArgs {
            config: &config.config,
            overrides: &config.overrides,
            data: &data,
            manifest: &manifest,
            out: &out,
            seed,
            workers,
            resume: resume.as_deref(),
        }),
        Command::Eval { input, out } => commands::eval(&input.checkpoint, &input.data, &input.manifest, input.split, &out),
        Command::Equivcheck { input, rotations, seed, identity_rotations, out } => commands::equivcheck(
            &input.checkpoint,
            &input.data,
            &input.manifest,
            input.split,
            rotations,
            seed,
            identity_rotations,
            &out,
        ),
        Command::Predict { checkpoint, xyz } => commands::predict(&checkpoint, &xyz),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
