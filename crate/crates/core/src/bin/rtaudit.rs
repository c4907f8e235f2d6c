// SPDX-License-Identifier: Apache-2.0

//! Scenario runner.
//!
//! Exit codes: 0 when the scenario ran and its expectations held, 1 when an
//! expectation failed, 2 when the scenario could not be run.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rtaudit::instrument::instrument;
use rtaudit::scenario::{measure_attack_window, run_scenario, Scenario, ScenarioError};

#[derive(Parser)]
#[command(name = "rtaudit", version, about = "Runtime control-flow auditing simulator")]
struct Cli {
    /// Print per-slice verdicts to stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Overrides {
    /// Scenario file (TOML).
    scenario: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// NS cycles before a timer report.
    #[arg(long)]
    delta: Option<u64>,
    /// Log capacity in bytes.
    #[arg(long)]
    log_max: Option<usize>,
    /// Write results here instead of stdout.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and emit its result as one JSON line.
    Run(Overrides),
    /// Measure the attack window for several log capacities (JSON lines).
    Window {
        #[command(flatten)]
        o: Overrides,
        /// Capacities in bytes.
        #[arg(long, value_delimiter = ',', default_values_t = [1024usize, 2048, 4096, 8192])]
        capacities: Vec<usize>,
    },
    /// Instrument an assembly file and print the rewritten source.
    Instrument {
        input: PathBuf,
        /// Where to write the instrumentation map (TOML).
        #[arg(long)]
        map: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

enum Failure {
    Expectation,
    Error(String),
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        Failure::Error(e.to_string())
    }
}

fn load(o: &Overrides) -> Result<Scenario, Failure> {
    let mut s = Scenario::load(&o.scenario)?;
    if let Some(v) = o.seed {
        s.seed = v;
    }
    if let Some(v) = o.delta {
        s.delta = v;
    }
    if let Some(v) = o.log_max {
        s.log_max = v;
    }
    Ok(s)
}

fn emit(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::Error(format!("{}: {e}", p.display()))),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| Failure::Error(e.to_string())),
    }
}

fn json(v: &impl serde::Serialize) -> String {
    serde_json::to_string(v).expect("results serialize") + "\n"
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Run(o) => {
            let s = load(&o)?;
            let r = run_scenario(&s)?;
            if cli.verbose > 0 {
                for v in &r.verdicts {
                    eprintln!(
                        "slice {} result={:?} mac_ok={} entries={} bytes={} violation={:?}",
                        v.slice, v.result, v.mac_ok, v.entries, v.log_size, v.violation
                    );
                }
                for e in &r.expectations {
                    eprintln!("expect {}: {} ({})", e.name, if e.ok { "ok" } else { "FAILED" }, e.detail);
                }
            }
            emit(o.output.as_deref(), &json(&r))?;
            if r.passed {
                Ok(())
            } else {
                Err(Failure::Expectation)
            }
        }
        Cmd::Window { o, capacities } => {
            let s = load(&o)?;
            let points = measure_attack_window(&s, &capacities)?;
            let text: String = points.iter().map(json).collect();
            emit(o.output.as_deref(), &text)
        }
        Cmd::Instrument { input, map, output } => {
            let src =
                std::fs::read_to_string(&input).map_err(|e| Failure::Error(format!("{}: {e}", input.display())))?;
            let inst = instrument(&src).map_err(|e| Failure::Error(format!("{}: {e}", input.display())))?;
            if let Some(p) = map {
                std::fs::write(&p, inst.map.to_toml()).map_err(|e| Failure::Error(format!("{}: {e}", p.display())))?;
            }
            emit(output.as_deref(), &inst.source())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Expectation) => ExitCode::from(1),
        Err(Failure::Error(msg)) => {
            eprintln!("rtaudit: {msg}");
            ExitCode::from(2)
        }
    }
}
