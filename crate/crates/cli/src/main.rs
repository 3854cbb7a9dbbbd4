//! `dmdd` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage or configuration errors, 2 data errors
//! (missing or corrupt datasets, unreadable files), 3 runtime errors.

mod commands;
mod opts;

use clap::error::ErrorKind;
use clap::Parser;
use dmdd_core::error::Error;
use opts::{Cli, Cmd};

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) => 1,
        Error::DatasetNotFound(_)
        | Error::CorruptDataset(_)
        | Error::Io { .. }
        | Error::Image { .. } => 2,
        _ => 3,
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match &cli.cmd {
        Cmd::Train(args) => commands::train(args),
        Cmd::Eval(args) => commands::eval(args),
        Cmd::Infer(args) => commands::infer(args),
        Cmd::Synth(args) => commands::synth(args),
        Cmd::MakeToyDataset(args) => commands::make_toy_dataset(args),
    };
    match result {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}
