//! `tapudd` command-line front end.
//!
//! Exit codes: 0 success, 1 runtime or data error, 2 usage error.

mod args;
mod commands;
mod manifest;

use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::Parser;

use args::{Cli, Command};
use manifest::{manifest_path, RunManifest};

pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<tapudd::Error> for Failure {
    fn from(e: tapudd::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn run(command: Command) -> Result<(), Failure> {
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let clock = Instant::now();
    let outcome = match &command {
        Command::Synth(a) => commands::synth(a)?,
        Command::Fit(a) => commands::fit(a)?,
        Command::Score(a) => commands::score(a)?,
        Command::Landscape(a) => commands::landscape(a)?,
        Command::Eval(a) => {
            print!("{}", commands::eval(a)?);
            return Ok(());
        }
        Command::Replay(a) => return replay(a),
    };
    let manifest = RunManifest {
        subcommand: command.name().to_string(),
        command,
        resolved: outcome.resolved,
        inputs: outcome.inputs,
        outputs: outcome.outputs.clone(),
        seed: outcome.seed,
        started_unix_secs: started,
        wall_clock_secs: clock.elapsed().as_secs_f64(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    for out in &outcome.outputs {
        manifest.write(&manifest_path(out))?;
    }
    Ok(())
}

fn replay(a: &args::ReplayArgs) -> Result<(), Failure> {
    let m = RunManifest::read(&a.manifest)?;
    let mut command = m.command;
    if let Some(out) = &a.out {
        match &mut command {
            Command::Synth(c) => c.out = out.clone(),
            Command::Fit(c) => c.out = out.clone(),
            Command::Score(c) => c.out = out.clone(),
            Command::Landscape(c) => c.out = out.clone(),
            Command::Eval(_) | Command::Replay(_) => {
                return Err(Failure::Usage("this manifest has no output to redirect".into()))
            }
        }
    }
    if matches!(command, Command::Replay(_)) {
        return Err(Failure::Usage("a manifest cannot record a replay".into()));
    }
    run(command)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
