//! Command-line front end: flag parsing, fold orchestration and the
//! subcommand bodies behind the `siamfuse` binary.

pub mod args;
pub mod commands;
pub mod experiment;

use args::{Cli, Command};

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Rank(a) => commands::rank(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    }
}
