use std::process::ExitCode;

use clap::Parser;
use woz_harness::cli::{self, Cli};

fn main() -> ExitCode {
    cli::run(Cli::parse())
}
