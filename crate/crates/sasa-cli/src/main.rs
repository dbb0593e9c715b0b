use clap::{Parser, Subcommand};

use sasa_cli::commands::{
    cmd_eval, cmd_export_structure, cmd_gen_data, cmd_train, EvalArgs, ExportArgs, GenDataArgs,
    TrainArgs,
};
use sasa_cli::log;

/// Time-series domain adaptation by sparse associative structure
/// alignment: synthetic benchmark generation, training, evaluation,
/// and structure export.
#[derive(Parser)]
#[command(name = "sasa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a source/target dataset pair from a lagged causal graph.
    GenData(GenDataArgs),
    /// Train the model (or the baseline) from a run config.
    Train(TrainArgs),
    /// Score a parameter snapshot on a dataset; prints JSON to stdout.
    Eval(EvalArgs),
    /// Export the batch-averaged structure matrix as CSV.
    ExportStructure(ExportArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args).map(|_| ()),
        Command::ExportStructure(args) => cmd_export_structure(args),
    };
    if let Err(err) = result {
        log::error(err.to_string());
        std::process::exit(err.exit_code());
    }
}
