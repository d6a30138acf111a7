use std::process::ExitCode;

use clap::Parser;
use ratio_forge_cli::{run, Cli};

fn main() -> ExitCode {
    ExitCode::from(run(Cli::parse()))
}
