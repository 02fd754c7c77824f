use std::process::ExitCode;

use clap::Parser;
use ipw_cli::commands::{execute, write_outputs};
use ipw_cli::{Cli, CliError};

fn run(cli: Cli) -> Result<bool, CliError> {
    let flags = cli.flags.resolve()?;
    let result = execute(cli.command, &flags)?;
    write_outputs(&result)?;
    for note in &result.notes {
        eprintln!("{note}");
    }
    Ok(result.success)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {}: {e}", e.cause());
            ExitCode::from(1)
        }
    }
}
