//! Command-line pipeline around `cpd-core`: synth, train, detect, eval,
//! sweep. Exposed as a library so integration tests drive the exact command
//! implementations.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;

use args::{Cli, Command};
use error::CliResult;

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Synth(a) => commands::synth::run(a),
        Command::Train(a) => commands::train::run(a),
        Command::Detect(a) => commands::detect::run(a),
        Command::Eval(a) => commands::eval::run(a),
        Command::Sweep(a) => commands::sweep::run(a),
    }
}
