mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

/// Spectral-attention signal detection: datasets, SCF renders, training,
/// evaluation and benchmarks.
#[derive(Debug, Parser)]
#[command(name = "scfattn", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Directory that receives every output file.
    #[arg(long, global = true, env = "SCFATTN_OUT_DIR", default_value = "scfattn-out")]
    pub out_dir: PathBuf,
    /// Worker threads; 0 uses every available core. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset manifest.
    Synth(commands::SynthArgs),
    /// Render the full SCF grid of one window as CSV and PGM.
    Scf(commands::ScfArgs),
    /// Train the attention policy on a manifest.
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint on a manifest split.
    Eval(commands::EvalArgs),
    /// Run a scenario benchmark end to end.
    Bench(commands::BenchArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return ExitCode::SUCCESS;
            }
            if !e.to_string().contains("Usage:") {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return ExitCode::from(1);
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.global.threads).build_global() {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(2);
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<commands::UsageError>().is_some() {
                eprintln!("\n{}", Cli::command().render_usage());
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
