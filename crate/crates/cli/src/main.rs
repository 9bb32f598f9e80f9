use std::process::ExitCode;

use clap::Parser;

use mixmodal_cli::{commands, error_line, Cli};

fn main() -> ExitCode {
    // clap prints usage and exits 2 on unknown commands or flags
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
