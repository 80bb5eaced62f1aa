//! Command-line front end.
//!
//! Exit codes: 0 ok, 1 oracle or acceptance breach, 2 I/O failure,
//! 3 invalid input (scenario, flags, rate table).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::engine::{self, EngineError, RunResult, ScenarioConfig, SweepAxis};
use crate::experiments::{self, TableId};
use crate::metrics::{self, MetricRow};
use crate::oracle::{self, OracleReport};

#[derive(Debug, Parser)]
#[command(name = "cmanet", version, about = "Deterministic Cloud-MANET discrete-event simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one scenario and write its trace, metrics and summary.
    Simulate(SimulateArgs),
    /// Run a scenario at several values of one parameter.
    Sweep(SweepArgs),
    /// Reproduce one of the result tables.
    Tables(TablesArgs),
    /// Check a scenario file without running it.
    Validate(ValidateArgs),
    /// Compare the fast implementations against brute-force oracles.
    Oracle(OracleArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct ScenarioSource {
    /// Scenario TOML file.
    #[arg(long, conflicts_with = "preset")]
    pub scenario: Option<PathBuf>,
    /// Built-in preset, `table1` .. `table5`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Overrides the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct Output {
    /// Artifact directory.
    #[arg(long, env = "CMANET_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub source: ScenarioSource,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub source: ScenarioSource,
    /// devices, epsilon_k, range or speed.
    #[arg(long)]
    pub axis: String,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub values: Vec<f64>,
    /// Worker threads; 0 uses one per core.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
pub struct TablesArgs {
    /// Table number, 1 to 5.
    #[arg(value_name = "ID", required_unless_present = "table")]
    pub id: Option<String>,
    #[arg(long, conflicts_with = "id")]
    pub table: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub scenario: PathBuf,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Random cases for the Marcum and entropy oracles.
    #[arg(long, default_value_t = 1000)]
    pub cases: usize,
    /// Monte Carlo samples per session-life grid point.
    #[arg(long, default_value_t = 10_000_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Rate table CSV to validate and replay through the throughput presets.
    #[arg(long)]
    pub rates: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
}

#[derive(Debug)]
pub enum CliError {
    Breach(String),
    Io(String),
    Invalid(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Breach(_) => 1,
            CliError::Io(_) => 2,
            CliError::Invalid(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Breach(m) | CliError::Io(m) | CliError::Invalid(m) => m,
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Io { .. } | EngineError::Artifacts(_) | EngineError::Json(_) | EngineError::Pool(_) => {
                CliError::Io(e.to_string())
            }
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn load_source(src: &ScenarioSource) -> Result<ScenarioConfig, CliError> {
    let mut config = match (&src.scenario, &src.preset) {
        (Some(path), _) => ScenarioConfig::load(path)?,
        (None, Some(name)) => experiments::preset(name)
            .ok_or_else(|| CliError::Invalid(format!("unknown preset {name:?} (expected table1 .. table5)")))?,
        (None, None) => return Err(CliError::Invalid("one of --scenario or --preset is required".into())),
    };
    if let Some(seed) = src.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut buf = Vec::new();
    metrics::write_metrics_csv(rows, &mut buf).expect("in-memory write");
    String::from_utf8(buf).expect("CSV is UTF-8")
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes")
}

fn simulate(args: &SimulateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let config = load_source(&args.source)?;
    let result = engine::run(config)?;
    if let Some(dir) = &args.output.out {
        result.write_artifacts(dir).map_err(|e| io_err(dir, e))?;
    }
    let text = match args.output.format {
        Format::Csv => format!("trace_digest,{}\n{}", result.digest, metrics_csv(&result.metrics)),
        Format::Json => to_json(&result.summary) + "\n",
    };
    out.write_all(text.as_bytes()).map_err(|e| CliError::Io(e.to_string()))
}

fn sweep(args: &SweepArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let config = load_source(&args.source)?;
    let axis: SweepAxis = args.axis.parse()?;
    let results: Vec<RunResult> = engine::sweep(&config, axis, &args.values, args.jobs)?;
    let rows: Vec<MetricRow> = results.iter().flat_map(|r| r.metrics.iter().cloned()).collect();
    if let Some(dir) = &args.output.out {
        for (r, v) in results.iter().zip(&args.values) {
            let sub = dir.join(format!("{}={v}", axis.as_str()));
            r.write_artifacts(&sub).map_err(|e| io_err(&sub, e))?;
        }
        write_file(&dir.join("metrics.csv"), metrics_csv(&rows))?;
    }
    let text = match args.output.format {
        Format::Csv => metrics_csv(&rows),
        Format::Json => to_json(&results.iter().map(|r| &r.summary).collect::<Vec<_>>()) + "\n",
    };
    out.write_all(text.as_bytes()).map_err(|e| CliError::Io(e.to_string()))
}

fn tables(args: &TablesArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let raw = args.id.as_deref().or(args.table.as_deref()).unwrap_or_default();
    let table = TableId::parse(raw).ok_or_else(|| CliError::Invalid(format!("unknown table {raw:?} (expected 1 to 5)")))?;
    let (text_csv, json, rows, ok) = if table.range().is_some() {
        let t = experiments::throughput_table(table, args.seed)?;
        (t.to_csv(), to_json(&t), t.metric_rows(), t.within_tolerance())
    } else {
        let t = experiments::transmission_table(table, args.seed, args.jobs)?;
        (t.to_csv(), to_json(&t), t.metric_rows(), t.ordering_holds())
    };
    if let Some(dir) = &args.output.out {
        write_file(&dir.join(format!("table{}.csv", table.number())), &text_csv)?;
        write_file(&dir.join(format!("table{}_metrics.csv", table.number())), metrics_csv(&rows))?;
    }
    let text = match args.output.format {
        Format::Csv => text_csv,
        Format::Json => json + "\n",
    };
    out.write_all(text.as_bytes()).map_err(|e| CliError::Io(e.to_string()))?;
    if ok {
        Ok(())
    } else if table.range().is_some() {
        Err(CliError::Breach(format!("table {}: a cell deviates by more than {}%", table.number(), experiments::THROUGHPUT_TOLERANCE * 100.0)))
    } else {
        Err(CliError::Breach(format!("table {}: device-count ordering fails in some column", table.number())))
    }
}

fn validate(args: &ValidateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let config = ScenarioConfig::load(&args.scenario)?;
    config.validate()?;
    writeln!(out, "{}: ok", args.scenario.display()).map_err(|e| CliError::Io(e.to_string()))
}

fn run_oracles(args: &OracleArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut reports: Vec<OracleReport> = Vec::new();
    if let Some(path) = &args.rates {
        if !path.exists() {
            return Err(io_err(path, "no such file"));
        }
        reports.push(experiments::rate_pipeline_check(path)?);
    }
    reports.push(oracle::check_session_life(args.samples, args.seed));
    reports.push(oracle::check_marcum(args.cases, args.seed));
    reports.push(oracle::check_entropy(args.cases, args.seed));
    reports.push(oracle::check_chi_square(args.seed));
    let text = match args.format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["oracle", "cases [count]", "max_deviation", "tolerance", "passed", "worst_case"])
                .expect("in-memory write");
            for r in &reports {
                w.write_record([
                    r.name.clone(),
                    r.cases.to_string(),
                    format!("{:.3e}", r.max_deviation),
                    format!("{:e}", r.tolerance),
                    r.passed.to_string(),
                    r.worst_case.clone(),
                ])
                .expect("in-memory write");
            }
            String::from_utf8(w.into_inner().expect("in-memory flush")).expect("CSV is UTF-8")
        }
        Format::Json => to_json(&reports) + "\n",
    };
    out.write_all(text.as_bytes()).map_err(|e| CliError::Io(e.to_string()))?;
    let breaches: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{} exceeded {:e}: {}", r.name, r.tolerance, r.worst_case))
        .collect();
    if breaches.is_empty() {
        Ok(())
    } else {
        Err(CliError::Breach(breaches.join("\n")))
    }
}

/// Runs a parsed command, writing its report to `out`.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Simulate(a) => simulate(a, out),
        Command::Sweep(a) => sweep(a, out),
        Command::Tables(a) => tables(a, out),
        Command::Validate(a) => validate(a, out),
        Command::Oracle(a) => run_oracles(a, out),
    }
}

/// Parses `args`, runs the command against stdout and maps the outcome to an
/// exit code. Usage errors count as invalid input.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(3) } else { ExitCode::SUCCESS };
        }
    };
    let stdout = std::io::stdout();
    match execute(&cli, &mut stdout.lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("cmanet").chain(args.iter().copied())).expect("parses")
    }

    fn run(args: &[&str]) -> (Result<(), CliError>, String) {
        let mut buf = Vec::new();
        let r = execute(&parse(args), &mut buf);
        (r, String::from_utf8(buf).unwrap())
    }

    #[test]
    fn table_id_positional_or_flag() {
        let (r, text) = run(&["tables", "3"]);
        assert!(r.is_ok());
        assert_eq!(text.lines().count(), 5);
        let (r, _) = run(&["tables", "--table", "4", "--format", "json"]);
        assert!(r.is_ok());
    }

    #[test]
    fn unknown_table_is_invalid() {
        let (r, _) = run(&["tables", "9"]);
        assert_eq!(r.unwrap_err().exit_code(), 3);
    }

    #[test]
    fn missing_scenario_is_io() {
        let (r, _) = run(&["simulate", "--scenario", "/nonexistent/scenario.toml"]);
        assert_eq!(r.unwrap_err().exit_code(), 2);
        let (r, _) = run(&["validate", "--scenario", "/nonexistent/scenario.toml"]);
        assert_eq!(r.unwrap_err().exit_code(), 2);
    }

    #[test]
    fn preset_simulation_prints_digest() {
        let (r, text) = run(&["simulate", "--preset", "table3", "--seed", "5"]);
        assert!(r.is_ok());
        let digest = text.lines().next().unwrap().strip_prefix("trace_digest,").unwrap();
        assert_eq!(digest.len(), 64);
    }

    #[test]
    fn empty_sweep_is_invalid() {
        let cli = Cli::try_parse_from(["cmanet", "sweep", "--preset", "table3", "--axis", "devices"]);
        // clap accepts an absent list; the engine rejects it
        let mut buf = Vec::new();
        let r = execute(&cli.expect("parses"), &mut buf);
        assert_eq!(r.unwrap_err().exit_code(), 3);
    }

    #[test]
    fn unknown_axis_is_invalid() {
        let (r, _) = run(&["sweep", "--preset", "table3", "--axis", "colour", "--values", "1"]);
        assert_eq!(r.unwrap_err().exit_code(), 3);
    }
}
