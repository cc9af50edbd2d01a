// SPDX-License-Identifier: MIT OR Apache-2.0

//! `pti`: weights, synthetic data, direction extraction, steered generation,
//! attention analysis, metrics and latency from the command line.
//!
//! Exit status: 0 success, 1 runtime failure, 2 usage error, 3 missing input
//! file, 4 model fingerprint mismatch, 5 output exists without `--force`.

mod args;
mod commands;
mod error;
mod files;
mod manifest;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use log::LevelFilter;

use args::{Cli, Command};
use error::{CliError, CliResult, EXIT_USAGE};

/// `PTI_LOG` = quiet | info | debug; quiet when unset.
fn init_logging() -> CliResult<()> {
    let level = match std::env::var("PTI_LOG").as_deref() {
        Err(_) | Ok("quiet") => LevelFilter::Warn,
        Ok("info") => LevelFilter::Info,
        Ok("debug") => LevelFilter::Debug,
        Ok(other) => {
            return Err(CliError::Usage(format!(
                "PTI_LOG must be quiet, info or debug, not {other:?}"
            )))
        }
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    init_logging()?;
    match &cli.command {
        Command::InitModel(a) => commands::init_model(a),
        Command::MakeSynth(a) => commands::make_synth(a),
        Command::Extract(a) => commands::extract(a),
        Command::Generate(a) => commands::generate_cmd(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench(a),
        Command::Grid(a) => commands::grid(a),
    }
}

/// Collapses a multi-line diagnostic, dropping clap's usage and help hints.
fn one_line(msg: &str) -> String {
    msg.lines()
        .map(str::trim)
        .take_while(|l| !l.starts_with("Usage:") && !l.starts_with("For more information"))
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            eprintln!("pti: {}", one_line(text.trim_start_matches("error: ")));
            return ExitCode::from(EXIT_USAGE as u8);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain = match &e {
                CliError::Runtime(inner) => format!("{inner:#}"),
                other => other.to_string(),
            };
            eprintln!("pti: {}", one_line(&chain));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::one_line;

    #[test]
    fn diagnostics_collapse_to_one_line() {
        let clap_text = "the following required arguments were not provided:\n  --vocab <VOCAB>\n\nUsage: pti init-model\n\nFor more information, try '--help'.\n";
        assert_eq!(one_line(clap_text), "the following required arguments were not provided: --vocab <VOCAB>");
        assert_eq!(one_line("plain"), "plain");
    }
}
