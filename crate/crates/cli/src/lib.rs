//! Command line and HTTP service for similarity-conditioned sound-effect
//! synthesis.

pub mod args;
pub mod commands;
pub mod data;
pub mod error;
pub mod server;

use clap::Parser;

pub use error::{CliError, CliResult};

/// Parses `argv`, runs the subcommand and returns the process exit code.
/// Success prints one JSON summary line to stdout; failure prints one JSON
/// error line to stderr.
pub fn run_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match args::Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::usage(first).to_json_line());
            return 2;
        }
    };
    match commands::run(&cli.global, cli.command) {
        Ok(v) => {
            println!("{v}");
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            e.exit_code
        }
    }
}
