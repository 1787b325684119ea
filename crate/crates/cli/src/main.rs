use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use evector_core::runner::{
    power_csv, report_fuzz, report_packets, report_power, run_with, RunOptions,
};
use evector_core::{parse_scenario, RunError, RunExit, RunResult, SimDriver, TelemetryStore};

const EXIT_INTERRUPTED: u8 = 1;
const EXIT_SCENARIO: u8 = 2;
const EXIT_INVARIANT: u8 = 3;

#[derive(Parser)]
#[command(name = "evector", version, about = "EV charging attack simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Driver {
    Mock,
    Linked,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Packets,
    Power,
    Fuzz,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write telemetry and reports.
    Run {
        scenario: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "linked")]
        driver: Driver,
        /// Pace virtual time against the wall clock.
        #[arg(long)]
        realtime: bool,
    },
    /// Print a report rebuilt from a run's output directory.
    Report {
        dir: PathBuf,
        #[arg(long, value_enum)]
        kind: Kind,
        /// Link for packet reports; defaults to the only link present.
        #[arg(long)]
        link: Option<String>,
    },
}

/// Errors mapped to a specific exit status.
#[derive(Debug)]
struct Exit(u8, String);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

fn run_cmd(path: PathBuf, seed: Option<u64>, out: PathBuf, driver: Driver, realtime: bool) -> Result<u8> {
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut scenario = parse_scenario(&text).map_err(|e| Exit(EXIT_SCENARIO, format!("{}: {e}", path.display())))?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    let driver = match driver {
        Driver::Mock => SimDriver::Mock,
        Driver::Linked => SimDriver::Linked,
    };
    let result = run_with(&scenario, driver, RunOptions { realtime }).map_err(|e| match e {
        RunError::ScenarioInvalid(_) => Exit(EXIT_SCENARIO, e.to_string()),
        RunError::InternalInvariantViolation(_) => Exit(EXIT_INVARIANT, e.to_string()),
    })?;
    let written = result
        .write_outputs(&out)
        .with_context(|| format!("writing outputs to {}", out.display()))?;
    println!(
        "{:?} at t={}s: {} records, wrote {} to {}",
        result.exit,
        result.end_s,
        result.store.len(),
        written.join(", "),
        out.display()
    );
    Ok(match result.exit {
        RunExit::Completed => 0,
        RunExit::Interrupted => EXIT_INTERRUPTED,
    })
}

fn report_cmd(dir: PathBuf, kind: Kind, link: Option<String>) -> Result<u8> {
    let path = dir.join("telemetry.jsonl");
    let store = TelemetryStore::load_jsonl(&path).with_context(|| format!("loading {}", path.display()))?;
    let result = RunResult::from_store(store)?;
    let text = match kind {
        Kind::Packets => {
            let link = match link {
                Some(l) => l,
                None => match result.packet_logs.keys().collect::<Vec<_>>().as_slice() {
                    [only] => (*only).clone(),
                    [] => bail!("run has no packet data"),
                    many => bail!(
                        "run has several links, pick one with --link: {}",
                        many.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
                    ),
                },
            };
            report_packets(&result, &link)?
        }
        Kind::Power => power_csv(&report_power(&result)),
        Kind::Fuzz => report_fuzz(&result)?,
    };
    print!("{text}");
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run {
            scenario,
            seed,
            out,
            driver,
            realtime,
        } => run_cmd(scenario, seed, out, driver, realtime),
        Command::Report { dir, kind, link } => report_cmd(dir, kind, link),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Exit>().map_or(EXIT_SCENARIO, |x| x.0);
            ExitCode::from(code)
        }
    }
}
