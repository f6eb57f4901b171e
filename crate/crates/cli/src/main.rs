mod commands;
mod config;
mod error;

use clap::{Parser, Subcommand};

use config::{Overrides, RunConfig};
use error::CliError;

#[derive(Parser)]
#[command(name = "diff-ilqr", version, about = "Differentiable iLQR experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare implicit, finite-difference and unrolled gradients of an imitation loss
    Gradcheck(Overrides),
    /// Time implicit backward against unrolled differentiation over forced iteration counts
    Benchmark(Overrides),
    /// Learn dynamics (`--mode dx`) or cost (`--mode cost`) parameters from expert controls
    Imitate(Overrides),
    /// Fit dynamics parameters to expert state transitions
    Sysid(Overrides),
    /// Generate an expert dataset as JSONL
    Dataset(Overrides),
}

fn run(cli: Cli) -> Result<String, CliError> {
    let (name, o, f): (&str, Overrides, fn(&RunConfig) -> Result<String, CliError>) = match cli.command {
        Command::Gradcheck(o) => ("gradcheck", o, commands::gradcheck),
        Command::Benchmark(o) => ("benchmark", o, commands::benchmark),
        Command::Imitate(o) => ("imitate", o, commands::imitate),
        Command::Sysid(o) => ("sysid", o, commands::sysid),
        Command::Dataset(o) => ("dataset", o, commands::dataset),
    };
    let cfg = RunConfig::resolve(name, &o)?;
    f(&cfg)
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(out) => println!("{out}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
