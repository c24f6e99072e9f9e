//! `fmod`: one executable for the whole pipeline. Synthesize scenes,
//! annotate them from LiDAR, train, evaluate, inspect stats, run
//! single-pair inference, gradient-check the tensor stack, or run a
//! preset experiment end to end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or config error,
//! 3 numerical error. `FMOD_LOG={error,warn,info,debug}` controls
//! logging.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fmod_cli::commands::{
    cmd_annotate, cmd_eval, cmd_experiment, cmd_gradcheck, cmd_infer, cmd_stats, cmd_synth,
    cmd_train, exit_code, CommandError,
};

#[derive(Parser)]
#[command(name = "fmod", version, about = "Fisheye moving-object detection laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a dataset config file.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the dataset seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Annotate a dataset's LiDAR scans into hull label masks.
    Annotate {
        /// Dataset directory containing manifest.json.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Minimum speed in m/s for an object to count as moving.
        #[arg(long = "v-min")]
        v_min: Option<f64>,
    },
    /// Train a model from a train config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory for the checkpoint, run log, and eval report.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the training seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate checkpoint weights against a manifest.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Where the EvalReport JSON lands.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print dataset statistics for a manifest as JSON.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Segment one frame pair with checkpoint weights.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long = "frame-t")]
        frame_t: PathBuf,
        #[arg(long = "frame-t1")]
        frame_t1: PathBuf,
        #[arg(long = "out-mask")]
        out_mask: PathBuf,
    },
    /// Run central-difference gradient checks over the tensor ops and
    /// the assembled model.
    Gradcheck {
        /// Only run cases whose name contains this substring.
        #[arg(long)]
        op: Option<String>,
    },
    /// Run a preset end to end: synth, annotate, train, evaluate.
    Experiment {
        #[arg(long)]
        preset: String,
        #[arg(long)]
        out: PathBuf,
        /// Overrides every seed bundled in the preset.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(cli: Cli) -> Result<(), CommandError> {
    match cli.command {
        Command::Synth { config, out, seed } => cmd_synth(&config, &out, seed),
        Command::Annotate { dataset, out, v_min } => cmd_annotate(&dataset, &out, v_min),
        Command::Train { config, out, seed } => cmd_train(&config, &out, seed),
        Command::Eval { weights, manifest, out } => cmd_eval(&weights, &manifest, &out),
        Command::Stats { manifest } => cmd_stats(&manifest),
        Command::Infer { weights, frame_t, frame_t1, out_mask } => {
            cmd_infer(&weights, &frame_t, &frame_t1, &out_mask)
        }
        Command::Gradcheck { op } => cmd_gradcheck(op.as_deref()),
        Command::Experiment { preset, out, seed } => cmd_experiment(&preset, &out, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FMOD_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests are successes; anything else is
            // a usage error reported on stderr.
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(exit_code(&err))
        }
    }
}
