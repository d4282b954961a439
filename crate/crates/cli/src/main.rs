//! Command-line driver for the matchgate-shadow AFQMC pipeline.
//!
//! Subcommands: prepare, shadows, run, analyze, rdm. Shared flags:
//! --config PATH, --seed N, --threads N, --force, --restore, --fci.

mod commands;
mod config;

use config::RunConfig;
use std::path::PathBuf;
use std::process::ExitCode as ProcessExit;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Ok = 0,
    MissingInput = 2,
    Capacity = 3,
    NumericalFailure = 4,
    IncompatibleCheckpoint = 5,
}

#[derive(Debug)]
pub struct CliError {
    pub code: ExitCode,
    pub message: String,
}

struct Args {
    command: String,
    config_path: PathBuf,
    seed: Option<u64>,
    threads: Option<usize>,
    force: bool,
    restore: bool,
    fci: bool,
}

const USAGE: &str = "usage: mgafqmc <prepare|shadows|run|analyze|rdm> --config PATH \
[--seed N] [--threads N] [--force] [--restore] [--fci]";

fn parse_args() -> Result<Args, String> {
    let mut argv = std::env::args().skip(1);
    let command = argv.next().ok_or(USAGE.to_string())?;
    let mut args = Args {
        command,
        config_path: PathBuf::from("mgafqmc.conf"),
        seed: None,
        threads: None,
        force: false,
        restore: false,
        fci: false,
    };
    while let Some(flag) = argv.next() {
        match flag.as_str() {
            "--config" => {
                args.config_path = PathBuf::from(argv.next().ok_or("--config needs a path")?)
            }
            "--seed" => {
                args.seed = Some(
                    argv.next()
                        .ok_or("--seed needs a value")?
                        .parse()
                        .map_err(|_| "bad --seed value".to_string())?,
                )
            }
            "--threads" => {
                args.threads = Some(
                    argv.next()
                        .ok_or("--threads needs a value")?
                        .parse()
                        .map_err(|_| "bad --threads value".to_string())?,
                )
            }
            "--force" => args.force = true,
            "--restore" => args.restore = true,
            "--fci" => args.fci = true,
            other => return Err(format!("unknown flag '{other}'\n{USAGE}")),
        }
    }
    Ok(args)
}

fn main() -> ProcessExit {
    let args = match parse_args() {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("{msg}");
            return ProcessExit::from(2);
        }
    };
    if let Some(threads) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("cannot size thread pool: {e}");
        }
    }
    if !args.config_path.exists() {
        eprintln!("config not found: {}", args.config_path.display());
        return ProcessExit::from(2);
    }
    let mut config = match RunConfig::load(&args.config_path) {
        Ok(c) => c,
        Err(msg) => {
            eprintln!("config error: {msg}");
            return ProcessExit::from(2);
        }
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let result = match args.command.as_str() {
        "prepare" => commands::cmd_prepare(&config, args.force, args.fci),
        "shadows" => commands::cmd_shadows(&config, args.force),
        "run" => commands::cmd_run(&config, args.restore),
        "analyze" => commands::cmd_analyze(&config),
        "rdm" => commands::cmd_rdm(&config),
        other => {
            eprintln!("unknown command '{other}'\n{USAGE}");
            return ProcessExit::from(2);
        }
    };
    match result {
        Ok(()) => ProcessExit::from(0),
        Err(CliError { code, message }) => {
            eprintln!("error: {message}");
            ProcessExit::from(code as u8)
        }
    }
}
