use std::process::ExitCode;

use clap::Parser;
use smart_analysis::cli::{main_with, Cli};

fn main() -> ExitCode {
    main_with(Cli::parse())
}
