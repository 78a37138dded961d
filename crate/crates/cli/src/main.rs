//! `gpmc`: multiclass GP classification from the command line.

mod args;
mod commands;
mod ingest;
mod methods;
mod model;
mod report;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

fn dispatch(cli: Cli) -> anyhow::Result<bool> {
    match &cli.command {
        Command::IngestCheck { common } => commands::ingest_check::run(common),
        Command::Train {
            common,
            method,
            test,
            out,
            trace,
        } => commands::train::run(common, method, test.as_deref(), out.as_deref(), trace.as_deref()),
        Command::Predict {
            model,
            data,
            labels,
            delimiter,
            out,
        } => commands::predict::run(model, data, labels, *delimiter, out.as_deref()),
        Command::Cv {
            common,
            method,
            folds,
            out,
        } => commands::cv::run(common, method, *folds, out.as_deref()),
        Command::Grid {
            common,
            grid,
            method,
            test,
            out,
        } => commands::grid::run(common, grid, method, test.as_deref(), out.as_deref()),
        Command::Compare {
            common,
            method,
            test,
            out,
        } => commands::compare::run(common, method, test.as_deref(), out.as_deref()),
        Command::Gibbs {
            common,
            samples,
            burn_in,
            thin,
            test,
            out,
        } => commands::gibbs::run(common, *samples, *burn_in, *thin, test.as_deref(), out.as_deref()),
    }
}

fn main() -> ExitCode {
    // Exit codes: 0 full success, 2 partial (flagged) results, 1 any error —
    // including usage errors, so clap's own code-2 convention is overridden.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(
            e.kind(),
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
        ) =>
        {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match dispatch(cli) {
        Ok(false) => ExitCode::SUCCESS,
        // Partial results: flagged fallbacks, failed folds, or grid holes.
        Ok(true) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
