//! Command-line driver: config, file formats and the subcommands.

pub mod artifact;
pub mod commands;
pub mod config;
pub mod error;
pub mod files;

use std::ffi::OsString;

use clap::Parser;

pub use commands::Cli;
pub use error::CliError;

/// Outcome of a whole invocation: text for stdout and the exit code.
pub struct Exit {
    pub code: i32,
    pub message: Option<String>,
}

/// Parses `args` (program name first) and runs the chosen command.
pub fn main_with_args<I, T>(args: I) -> Exit
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                error::EXIT_USAGE
            } else {
                error::EXIT_OK
            };
            return Exit {
                code,
                message: Some(e.render().to_string()),
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => Exit {
            code: error::EXIT_OK,
            message: None,
        },
        Err(e) => Exit {
            code: e.exit_code(),
            message: Some(format!("error: {e}")),
        },
    }
}
