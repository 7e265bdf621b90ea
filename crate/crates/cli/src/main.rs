//! `rulcast` command line: synthetic data generation, stage-wise training,
//! FPC detection, evaluation, and the full cross-validated experiment.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 training failure.

mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use commands::Cli;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version are not errors.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
