//! Command line front end for the condensation toolkit.
//!
//! The pipeline runs in stages, each stage a subcommand reading the files
//! the previous one wrote: train-experts records trajectories, condense
//! learns the synthetic set against them, train-eval scores any candidate
//! training set on the held-out split, and report aggregates the metric
//! files of a whole run directory. Every subcommand echoes its resolved
//! configuration to stdout so runs are auditable afterwards.

mod commands;
mod config;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "tsdc", version, about = "Time series dataset condensation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a buffer of expert trajectories on the real training split
    TrainExperts(commands::TrainExpertsArgs),
    /// Learn a condensed synthetic window set against an expert buffer
    Condense(commands::CondenseArgs),
    /// Pick a coreset of real windows with a baseline selector
    SelectCoreset(commands::SelectCoresetArgs),
    /// Train a fresh model on a chosen set and score it on the test split
    TrainEval(commands::TrainEvalArgs),
    /// Compare fine-tuning against condensed replay on a two-regime stream
    StreamEval(commands::StreamEvalArgs),
    /// Project real and condensed windows onto the top two principal axes
    Project(commands::ProjectArgs),
    /// Aggregate the metrics files of a run directory into report.csv/json
    Report(commands::ReportArgs),
}

fn main() {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::TrainExperts(args) => commands::train_experts(args),
        Command::Condense(args) => commands::condense_cmd(args),
        Command::SelectCoreset(args) => commands::select_coreset(args),
        Command::TrainEval(args) => commands::train_eval(args),
        Command::StreamEval(args) => commands::stream_eval_cmd(args),
        Command::Project(args) => commands::project(args),
        Command::Report(args) => commands::report(args),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e}");
        std::process::exit(e.code());
    }
}
