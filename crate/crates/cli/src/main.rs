mod args;
mod commands;
mod config;
mod error;

use clap::error::ErrorKind;
use clap::Parser;
use std::process::ExitCode;

use args::{Cli, Command};
use commands::Context;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };

    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = Context::new(&cli.global).and_then(|ctx| match &cli.command {
        Command::Prep(a) => commands::prep::run(&ctx, a),
        Command::Split(a) => commands::split::run(&ctx, a),
        Command::Synth(a) => commands::synth::run(&ctx, a),
        Command::Train(a) => commands::train::run(&ctx, a),
        Command::Search(a) => commands::search::run(&ctx, a),
        Command::Gradcheck(a) => commands::gradcheck::run(&ctx, a),
        Command::Eval(a) => commands::eval::run(&ctx, a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
