use std::process::ExitCode;

use clap::Parser;
use kern_cli::{execute, exit_code, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let args = std::env::args_os().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, args) {
        Ok(outcome) => {
            print!("{}", outcome.report);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
