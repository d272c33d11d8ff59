use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod layout;

use layout::Failure;

#[derive(Parser)]
#[command(name = "apa", version, about = "Adversarial perturbation adaptation on synthetic shifted tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Run config (TOML). Missing keys take their defaults.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Output root. Overrides `[run] out_dir` and `$APA_OUT_DIR`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace existing outputs of this command.
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TrainStage {
    Source,
    Adapt,
    AdaptSf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProbeKind {
    Drift,
    Corr,
    Shrink,
}

#[derive(Subcommand)]
enum Command {
    /// Write source.csv and target.csv for the configured task.
    GenData(Common),
    /// Run one training stage.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        stage: TrainStage,
        /// Target loss for the adaptation stages (default: `[loss] kind`).
        #[arg(long)]
        loss: Option<String>,
    },
    /// One adaptation run per value from the shared source checkpoint.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        param: String,
        /// Comma-separated values (default: the `[sweep]` list).
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        /// Comma-separated losses, one curve each (default: `[loss] kind`).
        #[arg(long, value_delimiter = ',')]
        loss: Option<Vec<String>>,
        /// Parallel runs (default: number of cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Diagnostic probes: classifier drift, perturbation correlations,
    /// gradient shrinking.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: ProbeKind,
        #[arg(long)]
        loss: Option<String>,
    },
    /// Gradient, identity and oracle checks; exits 1 on any failure.
    Verify {
        #[arg(long, default_value = "fast")]
        level: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData(c) => commands::gen_data(&c),
        Command::Train { common, stage, loss } => commands::train(&common, stage, loss.as_deref()),
        Command::Sweep { common, param, values, loss, jobs } => {
            commands::sweep(&common, &param, values, loss, jobs)
        }
        Command::Probe { common, kind, loss } => commands::probe(&common, kind, loss.as_deref()),
        Command::Verify { level, seed, out, force } => commands::verify(&level, seed, out, force),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { layout::EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
