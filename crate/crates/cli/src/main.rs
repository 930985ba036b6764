use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use eptlab::checks::Fault;
use eptlab::commands::{self, AnalyzeOptions, VerifyOptions};
use eptlab::config::SweepAxis;
use eptlab::{CliError, CliResult};
use eptlab_core::fewshot::SynthSpec;

/// Embedded prompt tuning lab.
///
/// Exit codes: 0 success, 1 failed check, 2 config error, 3 runtime error.
#[derive(Parser)]
#[command(name = "eptlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the invariant suite on generated inputs.
    Verify {
        /// A single check, or a group such as `gradient`.
        #[arg(long)]
        only: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Plant a known bug to confirm the suite catches it.
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<Fault>,
    },
    /// Train and evaluate every configured method over episodes and runs.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train one variant per axis value and collect a CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: SweepAxis,
    },
    /// Feature-distribution statistics of a checkpoint over a dataset.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-run result file; restricts the analysis to its evaluation split.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Analyse the untouched backbone instead of the tuned model.
        #[arg(long)]
        frozen: bool,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic dataset as a manifest plus payload files.
    Synth {
        #[arg(long, default_value = "toy-colon")]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Verify { only, seed, inject_fault } => {
            let opts = VerifyOptions {
                only,
                seed,
                fault: inject_fault,
            };
            commands::verify(&opts, &mut out).map(|_| ())
        }
        Command::Train { config } => commands::train(&config, &mut out),
        Command::Sweep { config, axis } => commands::sweep(&config, axis, &mut out).map(|_| ()),
        Command::Analyze {
            checkpoint,
            data,
            out: dir,
            run,
            frozen,
            bins,
            seed,
        } => {
            let opts = AnalyzeOptions {
                checkpoint,
                data,
                out: dir,
                run,
                frozen,
                bins,
                seed,
            };
            commands::analyze(&opts, &mut out).map(|_| ())
        }
        Command::Synth { preset, seed, out: dir } => {
            let spec = SynthSpec::preset(&preset).map_err(|_| CliError::config("--preset", format!("unknown preset `{preset}`")))?;
            commands::synth(&spec, seed, &dir, &mut out).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = run(cli);
    let _ = std::io::stdout().flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("eptlab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
