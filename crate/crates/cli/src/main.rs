//! `f2c`: generate synthetic tasks, train, evaluate and run studies.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 usage or schema error,
//! 3 numerical failure during training.

mod args;
mod artifacts;
mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train_cmd(a),
        Command::Eval(a) => commands::eval_cmd(a),
        Command::Study(a) => commands::study_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e.error));
            ExitCode::from(e.code)
        }
    }
}

/// Joins the error chain, skipping causes already quoted by their parent.
fn describe(error: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in error.chain() {
        let msg = cause.to_string();
        if !text.contains(&msg) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&msg);
        }
    }
    text
}
