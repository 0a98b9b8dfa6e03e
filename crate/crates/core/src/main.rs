use std::process::ExitCode;

use clap::Parser;
use cookstate::cli::{self, Cli};

fn main() -> ExitCode {
    let argv = match cli::expand_config(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(cli::EXIT_USAGE as u8);
        }
    };
    let args = match Cli::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => e.exit(),
    };
    let level = if args.verbose {
        log::LevelFilter::Debug
    } else {
        log::LevelFilter::Info
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    match cli::run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
