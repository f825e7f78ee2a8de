//! `vidsal`: synthesize data, train, evaluate and compare video saliency
//! models.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or
//! validation error, 3 internal check failure.

mod args;
mod commands;
mod config;
mod failure;

use std::process::ExitCode;

use clap::Parser;

use crate::args::{Cli, Command};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let config = cli.config.as_deref();
    let result = match cli.command {
        Command::Synth(a) => commands::synth::run(config, a),
        Command::Train(a) => commands::train::run(config, a),
        Command::Eval(a) => commands::eval::run(config, a),
        Command::Compare(a) => commands::compare::run(a),
        Command::SweepAlpha(a) => commands::sweep::run(config, a),
        Command::Gradcheck(a) => commands::gradcheck::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
