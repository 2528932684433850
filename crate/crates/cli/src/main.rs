//! `cascade`: validate data, run the four classification methods, evaluate
//! decision logs, sweep thresholds and generate synthetic fixtures.

mod commands;
mod config;
mod exit;
mod fsio;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cascade", version, about = "Uncertainty-routed intent classification cascade")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one method over a corpus and write a decision log plus manifest.
    Run(commands::run::RunArgs),
    /// Score a decision log against the corpus gold labels.
    Eval(commands::eval::EvalArgs),
    /// Run a method over a grid of sigma or P values and emit CSV rows.
    Sweep(commands::sweep::SweepArgs),
    /// Generate a synthetic corpus, ensemble log and label file.
    Synth(commands::synth::SynthArgs),
    /// Check a corpus (and optionally an ensemble log) without running anything.
    Validate(commands::validate::ValidateArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => commands::run::execute(args),
        Command::Eval(args) => commands::eval::execute(args),
        Command::Sweep(args) => commands::sweep::execute(args),
        Command::Synth(args) => commands::synth::execute(args),
        Command::Validate(args) => commands::validate::execute(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit::code_for(&err))
        }
    }
}
