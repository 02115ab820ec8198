//! `gdp-sim`: run, validate and compare GDP network scenarios.
//!
//! Exit codes: 0 ok, 1 usage or config error (and `diff` differences),
//! 2 safety violation (a tampered transaction was committed).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gdp_core::simulator::{builtin_with, run, write_outputs, ConfigError, ScenarioConfig, BUILTIN_SCENARIOS};
use serde_json::Value;

const EXIT_OK: u8 = 0;
const EXIT_USAGE: u8 = 1;
const EXIT_SAFETY: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "gdp-sim", version, about = "Deterministic GDP network simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a scenario and write the report, event log and CSVs.
    Run {
        #[command(flatten)]
        source: Source,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse and validate a config, then print it with defaults filled in.
    Validate {
        #[command(flatten)]
        source: Source,
    },
    /// List the built-in scenarios.
    Scenarios,
    /// Compare two report files field by field.
    Diff { a: PathBuf, b: PathBuf },
}

#[derive(Args, Debug)]
struct Source {
    /// Scenario config file (TOML).
    #[arg(long, conflicts_with = "scenario", required_unless_present = "scenario")]
    config: Option<PathBuf>,
    /// Name of a built-in scenario.
    #[arg(long)]
    scenario: Option<String>,
    /// Override the seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-path override, e.g. `panel.k=7` or `adversaries.0.count=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Source {
    fn load(&self) -> Result<ScenarioConfig, ConfigError> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        match (&self.config, &self.scenario) {
            (Some(path), _) => ScenarioConfig::load(path, &overrides),
            (None, Some(name)) => builtin_with(name, &overrides),
            (None, None) => unreachable!("clap requires one source"),
        }
    }
}

fn cmd_run(source: &Source, out: &Path) -> u8 {
    let config = match source.load() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let outcome = match run(config) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    if let Err(e) = write_outputs(&outcome, out) {
        eprintln!("error: cannot write {}: {e}", out.display());
        return EXIT_USAGE;
    }
    let m = &outcome.report.metrics;
    let c = &outcome.report.checks;
    println!(
        "{} seed={} ticks={} submitted={} committed={} false_commits={} safety={} liveness={} checks={}",
        outcome.report.scenario,
        outcome.report.seed,
        m.ticks,
        m.submitted,
        m.committed_count,
        m.false_commit_count,
        m.safety_ok,
        m.liveness_ok,
        if c.all_hold() { "ok" } else { "FAILED" },
    );
    if m.safety_ok {
        EXIT_OK
    } else {
        EXIT_SAFETY
    }
}

fn cmd_validate(source: &Source) -> u8 {
    match source.load() {
        Ok(c) => {
            print!("{}", c.to_toml());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}

fn cmd_scenarios() -> u8 {
    for s in BUILTIN_SCENARIOS {
        let description = builtin_with(s.name, &[]).map(|c| c.description).unwrap_or_default();
        println!("{:24} {description}", s.name);
    }
    EXIT_OK
}

/// Leaf paths at which `a` and `b` differ.
fn diff_values(path: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
            for k in keys {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match (x.get(k), y.get(k)) {
                    (Some(u), Some(v)) => diff_values(&p, u, v, out),
                    (Some(u), None) => out.push(format!("{p}: {u} -> (missing)")),
                    (None, Some(v)) => out.push(format!("{p}: (missing) -> {v}")),
                    (None, None) => {}
                }
            }
        }
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
            for (i, (u, v)) in x.iter().zip(y).enumerate() {
                diff_values(&format!("{path}.{i}"), u, v, out);
            }
        }
        _ if a != b => out.push(format!("{path}: {a} -> {b}")),
        _ => {}
    }
}

fn read_report(path: &Path) -> Result<Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{} is not a report: {e}", path.display()))
}

fn cmd_diff(a: &Path, b: &Path) -> u8 {
    let (va, vb) = match (read_report(a), read_report(b)) {
        (Ok(x), Ok(y)) => (x, y),
        (Err(e), _) | (_, Err(e)) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let mut changes = Vec::new();
    diff_values("", &va, &vb, &mut changes);
    if changes.is_empty() {
        println!("identical");
        EXIT_OK
    } else {
        for c in &changes {
            println!("{c}");
        }
        println!("{} field(s) differ", changes.len());
        EXIT_USAGE
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };
    let code = match &cli.command {
        Command::Run { source, out } => cmd_run(source, out),
        Command::Validate { source } => cmd_validate(source),
        Command::Scenarios => cmd_scenarios(),
        Command::Diff { a, b } => cmd_diff(a, b),
    };
    ExitCode::from(code)
}
