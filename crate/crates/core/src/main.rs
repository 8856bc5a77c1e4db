use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = acol::cli::Cli::parse();
    match acol::cli::run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("acol: {e}");
            ExitCode::FAILURE
        }
    }
}
