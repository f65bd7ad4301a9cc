use std::process::ExitCode;

use clap::Parser;
use flexpe_cli::{emit, execute, run_replay, Cli, CliError, Command, EXIT_GATE};

fn run(cli: Cli) -> Result<(), CliError> {
    let outcome = match cli.command {
        Command::Replay(a) => run_replay(&a)?,
        cmd => execute(cmd)?,
    };
    emit(&outcome)?;
    match outcome.gate {
        Some(msg) => Err(CliError::gate(anyhow::anyhow!(msg))),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let tag = if e.code == EXIT_GATE { "gate failed" } else { "error" };
            eprintln!("flexpe: {tag}: {e}");
            ExitCode::from(e.code)
        }
    }
}
