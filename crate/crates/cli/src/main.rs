use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use saliency_audit_cli::{run, CliError, Command, RunConfig};

/// Audit pixel-importance estimators with MiF/LiF degradation curves,
/// artifact bounds and the crop-and-rescale metric.
#[derive(Debug, Parser)]
#[command(name = "saliency-audit", version)]
struct Args {
    /// TOML run configuration.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set fidelity.n_stars=[0.2]`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Sub,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Write the synthetic train and test splits as PNG and IDX files.
    SynthData,
    /// Train the CNN and write the model file.
    Train,
    /// Sweep blur strengths and pick the smallest that reaches chance.
    CalibrateBlur,
    /// MiF/LiF degradation curves, plain and with shifted masks.
    Curves,
    /// Fidelity, U and artifact bounds at each n*.
    Fidelity,
    /// Crop-and-rescale scores per estimator and region method.
    CropEval,
    /// Histograms of normalized importance scores.
    Histogram,
    /// Curves, fidelity, crop and histograms in one run.
    Report,
}

impl From<&Sub> for Command {
    fn from(s: &Sub) -> Self {
        match s {
            Sub::SynthData => Command::SynthData,
            Sub::Train => Command::Train,
            Sub::CalibrateBlur => Command::CalibrateBlur,
            Sub::Curves => Command::Curves,
            Sub::Fidelity => Command::Fidelity,
            Sub::CropEval => Command::CropEval,
            Sub::Histogram => Command::Histogram,
            Sub::Report => Command::Report,
        }
    }
}

fn init_threads() -> Result<(), CliError> {
    let threads = match std::env::var("SALIENCY_AUDIT_THREADS") {
        Ok(v) => v.trim().parse::<usize>().map_err(|_| {
            CliError::Config(format!("SALIENCY_AUDIT_THREADS must be a count, got '{v}'"))
        })?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = init_threads()
        .and_then(|()| RunConfig::load(args.config.as_deref(), &args.overrides))
        .and_then(|cfg| run(Command::from(&args.command), cfg));
    match result {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
