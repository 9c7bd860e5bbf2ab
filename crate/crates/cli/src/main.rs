use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = oodlab_cli::Cli::parse();
    match oodlab_cli::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
