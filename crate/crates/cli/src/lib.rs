//! Command-line orchestration for the reserving engine: argument validation,
//! subcommand dispatch and report emission.
//!
//! A JSON report has a fixed envelope: `schema_version`, `command`, the
//! validated `config`, the numeric `results`, and a `provenance` block whose
//! wall time is the only field that varies between identical runs.

pub mod commands;
pub mod config;
pub mod error;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

pub use crate::config::{Cli, Command, RunConfig};
pub use crate::error::CliError;

use crate::commands::Rendered;
use crate::config::{thread_count, validate, Format};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub version: &'static str,
    pub seed: u64,
    /// Worker threads requested; 0 means one per core.
    pub threads: usize,
    pub wall_time_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub command: String,
    pub config: RunConfig,
    pub results: serde_json::Value,
    pub provenance: Provenance,
}

/// Report text and optional figure CSV of a finished run.
pub struct Output {
    pub report: String,
    pub figure: Option<String>,
}

/// Validates the command, runs it on a dedicated thread pool and renders the report.
pub fn execute(command: &Command) -> Result<Output, CliError> {
    let config = validate(command)?;
    let threads = thread_count(config.parallel)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let started = Instant::now();
    let rendered: Rendered = pool.install(|| match command {
        Command::Fit(_) => commands::fit(&config),
        Command::Simulate(_) => commands::simulate(&config),
        Command::Mixed(_) => commands::mixed(&config),
        Command::Lrt(_) => commands::lrt(&config),
        Command::Split(_) => commands::split(&config),
    })?;
    let report = match config.format {
        Format::Csv => rendered.csv,
        Format::Json => {
            let report = Report {
                schema_version: SCHEMA_VERSION,
                command: config.command.clone(),
                provenance: Provenance {
                    version: env!("CARGO_PKG_VERSION"),
                    seed: config.seed,
                    threads,
                    wall_time_seconds: started.elapsed().as_secs_f64(),
                },
                config,
                results: rendered.json,
            };
            let mut text = serde_json::to_string_pretty(&report)?;
            text.push('\n');
            text
        }
    };
    Ok(Output {
        report,
        figure: rendered.figure,
    })
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|source| CliError::Output {
        path: path.to_path_buf(),
        source,
    })
}

/// Runs the command and writes the report and figure data to their destinations.
pub fn run(command: &Command) -> Result<(), CliError> {
    let output = execute(command)?;
    let args = command.args();
    if let (Some(path), Some(figure)) = (&args.figure_out, &output.figure) {
        write_file(path, figure)?;
    }
    match &args.out {
        Some(path) => write_file(path, &output.report),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(output.report.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|source| CliError::Output {
                    path: "<stdout>".into(),
                    source,
                })
        }
    }
}
