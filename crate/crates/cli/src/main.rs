//! `rml` command-line entry point.

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

mod args;
mod commands;

use args::{Cli, Command};

fn error_line(kind: &str, message: &str) -> String {
    let flat = message.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" ");
    format!("error kind={kind} message={flat:?}")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            _ => {
                let text = e.render().to_string();
                let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
                eprintln!("{}", error_line("usage", first));
                return ExitCode::from(2);
            }
        },
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Cluster(a) => commands::cluster(&a),
        Command::Classify(a) => commands::classify(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
