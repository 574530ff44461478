//! Command-line arguments and their validation into a [`RunConfig`].

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use reserve_lab::microsim::Variant;
use reserve_lab::mixed::{DEFAULT_BOOTSTRAP_REPLICATES, DEFAULT_PREDICTION_DRAWS};

use crate::error::CliError;

/// Sweep used by `simulate` when no `--theta` is given.
pub const DEFAULT_SWEEP: [f64; 7] = [10.0, 25.0, 50.0, 100.0, 125.0, 150.0, 250.0];

/// Environment variable capping the worker threads of parallel runs.
pub const THREADS_ENV: &str = "RESERVE_LAB_THREADS";

#[derive(Debug, Parser)]
#[command(name = "reserve-lab", version, about = "Macro and micro stochastic claims reserving")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Poisson and quasi-Poisson macro reserves with Mack's chain ladder.
    Fit(RunArgs),
    /// Disaggregation experiment over a theta sweep (variants C to F).
    Simulate(RunArgs),
    /// Random-intercept experiment with conditional and unconditional reserves (variant G).
    Mixed(RunArgs),
    /// Variance-component likelihood-ratio tests on variant G replicates.
    Lrt(RunArgs),
    /// Dump one disaggregated replicate.
    Split(RunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Fit(_) => "fit",
            Command::Simulate(_) => "simulate",
            Command::Mixed(_) => "mixed",
            Command::Lrt(_) => "lrt",
            Command::Split(_) => "split",
        }
    }

    pub fn args(&self) -> &RunArgs {
        match self {
            Command::Fit(a)
            | Command::Simulate(a)
            | Command::Mixed(a)
            | Command::Lrt(a)
            | Command::Split(a) => a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[value(rename_all = "UPPER")]
pub enum ModelArg {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
}

impl ModelArg {
    fn micro_variant(self) -> Option<Variant> {
        match self {
            ModelArg::A | ModelArg::B => None,
            ModelArg::C => Some(Variant::C),
            ModelArg::D => Some(Variant::D),
            ModelArg::E => Some(Variant::E),
            ModelArg::F => Some(Variant::F),
            ModelArg::G => Some(Variant::G),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, clap::Args)]
pub struct RunArgs {
    /// Triangle CSV (`I=n` header, blanks below the anti-diagonal).
    #[arg(long)]
    pub triangle: PathBuf,
    /// Factor applied to every triangle entry.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    /// Mean payments per cell; comma-separated list.
    #[arg(long, value_delimiter = ',')]
    pub theta: Vec<f64>,
    /// Monte-Carlo replicates per theta.
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, value_enum)]
    pub variant: Option<ModelArg>,
    /// Target correlation of the payment covariate (variants E and F).
    #[arg(long)]
    pub rho: Option<f64>,
    /// Report destination; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Figure-data CSV destination (`simulate`, `mixed`).
    #[arg(long)]
    pub figure_out: Option<PathBuf>,
    /// Run replicates on several threads, capped by RESERVE_LAB_THREADS.
    #[arg(long)]
    pub parallel: bool,
    /// Monte-Carlo draws per mixed-model prediction.
    #[arg(long)]
    pub draws: Option<usize>,
    /// Parametric bootstrap replicates per likelihood-ratio test.
    #[arg(long)]
    pub bootstrap: Option<usize>,
    /// Replicate index dumped by `split`.
    #[arg(long, default_value_t = 0)]
    pub replicate: usize,
}

/// Validated configuration, echoed in every report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub triangle: PathBuf,
    pub scale: f64,
    pub thetas: Vec<f64>,
    pub replicates: usize,
    pub seed: u64,
    pub variant: Option<ModelArg>,
    pub rho: Option<f64>,
    pub format: Format,
    pub out: Option<PathBuf>,
    pub figure_out: Option<PathBuf>,
    pub parallel: bool,
    pub draws: usize,
    pub bootstrap: usize,
    pub replicate: usize,
}

impl RunConfig {
    /// Micro variant selected for `simulate` and `split`.
    pub fn micro_variant(&self) -> Variant {
        self.variant
            .and_then(ModelArg::micro_variant)
            .unwrap_or(Variant::D)
    }
}

fn invalid(message: impl Into<String>) -> CliError {
    CliError::Config(message.into())
}

pub fn validate(command: &Command) -> Result<RunConfig, CliError> {
    let args = command.args();
    let name = command.name();
    if !(args.scale > 0.0) || !args.scale.is_finite() {
        return Err(invalid(format!("--scale {} must be positive", args.scale)));
    }
    if let Some(&bad) = args.theta.iter().find(|t| !(**t > 0.0) || !t.is_finite()) {
        return Err(invalid(format!("--theta {bad} must be positive")));
    }
    if args.replicates == Some(0) {
        return Err(invalid("--replicates must be at least 1"));
    }
    if let Some(rho) = args.rho {
        if !(-1.0..=1.0).contains(&rho) {
            return Err(invalid(format!("--rho {rho} outside [-1, 1]")));
        }
    }
    if matches!(args.draws, Some(d) if d < 2) {
        return Err(invalid("--draws must be at least 2"));
    }

    let allowed: &[ModelArg] = match command {
        Command::Fit(_) => &[ModelArg::A, ModelArg::B],
        Command::Simulate(_) => &[ModelArg::C, ModelArg::D, ModelArg::E, ModelArg::F],
        Command::Mixed(_) | Command::Lrt(_) => &[ModelArg::G],
        Command::Split(_) => &[ModelArg::C, ModelArg::D, ModelArg::E, ModelArg::F, ModelArg::G],
    };
    if let Some(v) = args.variant {
        if !allowed.contains(&v) {
            return Err(invalid(format!("variant {v:?} is not available for `{name}`")));
        }
    }
    let variant = args.variant.or(match command {
        Command::Fit(_) => None,
        Command::Simulate(_) | Command::Split(_) => Some(ModelArg::D),
        Command::Mixed(_) | Command::Lrt(_) => Some(ModelArg::G),
    });
    let takes_rho = matches!(variant, Some(ModelArg::E | ModelArg::F));
    if args.rho.is_some() && !takes_rho {
        return Err(invalid("--rho only applies to variants E and F"));
    }
    let rho = args
        .rho
        .or_else(|| variant.and_then(ModelArg::micro_variant).and_then(Variant::default_rho));

    let mixed_like = matches!(command, Command::Mixed(_) | Command::Lrt(_));
    if (args.draws.is_some() && !matches!(command, Command::Mixed(_)))
        || (args.bootstrap.is_some() && !mixed_like)
    {
        return Err(invalid(format!("--draws/--bootstrap do not apply to `{name}`")));
    }
    if args.figure_out.is_some() && !matches!(command, Command::Simulate(_) | Command::Mixed(_)) {
        return Err(invalid(format!("--figure-out does not apply to `{name}`")));
    }

    let thetas = match (command, args.theta.is_empty()) {
        (Command::Fit(_), false) => return Err(invalid("--theta does not apply to `fit`")),
        (Command::Fit(_), true) => Vec::new(),
        (Command::Simulate(_), true) => DEFAULT_SWEEP.to_vec(),
        (_, true) => vec![10.0],
        (_, false) => args.theta.clone(),
    };
    if matches!(command, Command::Split(_)) && thetas.len() != 1 {
        return Err(invalid("`split` takes a single --theta"));
    }
    if matches!(command, Command::Simulate(_)) && args.figure_out.is_some() && thetas.len() < 2 {
        return Err(invalid("figure data needs at least two --theta values"));
    }
    let replicates = match command {
        Command::Fit(_) | Command::Split(_) => {
            if args.replicates.is_some() {
                return Err(invalid(format!("--replicates does not apply to `{name}`")));
            }
            1
        }
        Command::Lrt(_) => args.replicates.unwrap_or(1),
        Command::Simulate(_) | Command::Mixed(_) => args.replicates.unwrap_or(100),
    };

    Ok(RunConfig {
        command: name.to_string(),
        triangle: args.triangle.clone(),
        scale: args.scale,
        thetas,
        replicates,
        seed: args.seed,
        variant,
        rho,
        format: args.format,
        out: args.out.clone(),
        figure_out: args.figure_out.clone(),
        parallel: args.parallel,
        draws: args.draws.unwrap_or(DEFAULT_PREDICTION_DRAWS),
        bootstrap: match command {
            Command::Lrt(_) => args.bootstrap.unwrap_or(DEFAULT_BOOTSTRAP_REPLICATES),
            _ => args.bootstrap.unwrap_or(0),
        },
        replicate: args.replicate,
    })
}

/// Worker threads: 1 unless `--parallel`, then the environment cap or all cores.
pub fn thread_count(parallel: bool) -> Result<usize, CliError> {
    if !parallel {
        return Ok(1);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(invalid(format!("{THREADS_ENV}={v:?} is not a positive integer"))),
        },
        Err(_) => Ok(0),
    }
}
