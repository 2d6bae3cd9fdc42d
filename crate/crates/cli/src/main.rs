//! `multidefault` command-line front end.
//!
//! Exit codes: 0 success, 1 failed verification, 2 configuration error or
//! unknown suite, 3 solver error, 4 I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use multidefault::config::RunConfig;
use multidefault::runner::{cmd_price, cmd_simulate, cmd_verify, SUITES};
use multidefault::Error;

#[derive(Parser)]
#[command(name = "multidefault", version, about = "BSDE pricing with multiple ordered defaults")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides scenario.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory; overrides output.dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Price the configured claim and emit a result record.
    Price,
    /// Run a verification suite.
    Verify {
        /// One of: martingale, euler, cross, contraction, apriori, comparison, replication, pq, flow.
        suite: String,
    },
    /// Export simulated paths as CSV.
    Simulate,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io(_) => 4,
        _ => 3,
    }
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(exit_code(&e))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Command::Verify { suite } = &cli.command {
        if !SUITES.contains(&suite.as_str()) {
            return fail(Error::Config(format!("unknown suite {suite:?}; expected one of {}", SUITES.join(", "))));
        }
    }
    let Some(path) = &cli.config else {
        return fail(Error::Config("--config is required".into()));
    };
    let mut cfg = match RunConfig::load(path) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    if let Some(seed) = cli.seed {
        cfg.scenario.seed = seed;
    }
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail(Error::Config(format!("cannot start {n} threads: {e}")));
        }
    }
    let out = cli.out.as_deref();
    let printed = match &cli.command {
        Command::Price => cmd_price(&cfg, out).and_then(|r| Ok((serde_json::to_string(&r)?, true))),
        Command::Verify { suite } => cmd_verify(suite, &cfg, out).and_then(|r| Ok((serde_json::to_string_pretty(&r)?, r.passed))),
        Command::Simulate => cmd_simulate(&cfg, out).map(|p| (p.display().to_string(), true)),
    };
    match printed {
        Ok((text, ok)) => {
            println!("{text}");
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => fail(e),
    }
}
