//! Single entry point for the full workflow: data generation, training,
//! evaluation, inference export, gradient checking, and the preliminary
//! query-vs-random study.

mod commands;
mod rundir;

use clap::{Parser, Subcommand};

use slotseg_core::Error;

#[derive(Parser)]
#[command(name = "slotseg", version, about = "Object-centric video segmentation workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic moving-shapes benchmark (train and eval splits).
    GenData(commands::GenDataArgs),
    /// Train the model and write checkpoints plus a loss log.
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint on a dataset and write a metric report.
    Eval(commands::EvalArgs),
    /// Export semantic and instance masks for one video.
    Infer(commands::InferArgs),
    /// Verify analytic gradients of every objective against finite differences.
    Gradcheck(commands::GradcheckArgs),
    /// Run the query-vs-random initialization study on both feature modes.
    Preliminary(commands::PreliminaryArgs),
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage and flag errors are contract errors: exit 1.
            let _ = e.print();
            std::process::exit(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenData(args) => commands::gen_data(args),
        Command::Train(args) => commands::train(args),
        Command::Eval(args) => commands::eval(args),
        Command::Infer(args) => commands::infer(args),
        Command::Gradcheck(args) => commands::gradcheck(args),
        Command::Preliminary(args) => commands::preliminary(args),
    };
    match result {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(exit_code(&err));
        }
    }
}

/// 1 for contract/config violations, 2 for runtime failures.
fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Contract(_) | Error::ShapeMismatch { .. } => 1,
        Error::NonFinite { .. } | Error::DataFormat { .. } | Error::Io { .. } => 2,
    }
}
