use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use spiked_cli::{run, Cli, CliError};

fn main() -> ExitCode {
    faer::set_global_parallelism(faer::Par::Seq);
    let cli = Cli::parse();
    let name = cli.command.name();
    match run(&cli).with_context(|| format!("{name} failed")) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .downcast_ref::<CliError>()
                .map(CliError::exit_code)
                .unwrap_or(1);
            ExitCode::from(code)
        }
    }
}
