//! Command-line front end for `occnet`: file formats, the `occnet` subcommands and
//! replicated experiments.

pub mod commands;
pub mod error;
pub mod experiment;
pub mod io;

use std::ffi::OsString;

use clap::error::ErrorKind;
use clap::Parser;

pub use commands::Cli;
pub use error::CliError;

/// Parses `args` (program name first), runs the command and returns the exit code:
/// 0 success, 1 usage error, 2 data error, 3 numeric failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
