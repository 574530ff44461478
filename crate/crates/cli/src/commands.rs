//! One function per subcommand; each returns serializable results plus CSV renderings.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use reserve_lab::glm::Family;
use reserve_lab::microsim::{self, Payment, SimConfig, SimSummary, Variant};
use reserve_lab::mixed::{self, LrtRecord, MixedConfig, MixedSummary};
use reserve_lab::reserve::{self, ModelTag, ReserveEstimate};
use reserve_lab::triangle::{load_triangle_file, Triangle};

use crate::config::RunConfig;
use crate::error::CliError;

/// Results of one subcommand, with its CSV rendering and optional figure data.
pub struct Rendered {
    pub json: serde_json::Value,
    pub csv: String,
    pub figure: Option<String>,
}

pub fn load(config: &RunConfig) -> Result<Triangle, CliError> {
    load_triangle_file(&config.triangle, config.scale).map_err(|source| CliError::Input {
        path: config.triangle.clone(),
        source,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelRow {
    pub model: String,
    pub description: &'static str,
    pub reserve: f64,
    pub msep: f64,
    pub sqrt_msep: f64,
    pub dispersion: Option<f64>,
    /// Reserve per origin period, oldest first.
    pub origin_reserves: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitResults {
    pub models: Vec<ModelRow>,
    pub development_factors: Vec<f64>,
    pub mack_sigma2: Vec<f64>,
    pub mack_origin_sqrt_msep: Vec<f64>,
}

fn glm_row(est: &ReserveEstimate, size: usize, description: &'static str) -> ModelRow {
    ModelRow {
        model: est.model.map(|m| m.to_string()).unwrap_or_default(),
        description,
        reserve: est.best_estimate,
        msep: est.msep.unwrap_or(f64::NAN),
        sqrt_msep: est.sqrt_msep.unwrap_or(f64::NAN),
        dispersion: est.dispersion,
        origin_reserves: est.by_origin(size),
    }
}

pub fn fit(config: &RunConfig) -> Result<Rendered, CliError> {
    let t = load(config)?;
    let size = t.size();
    let mut models = Vec::new();
    let want = |tag: ModelTag| config.variant.is_none() || config.variant.map(|v| format!("{v:?}")) == Some(tag.to_string());
    if want(ModelTag::A) {
        let (_, a) = reserve::macro_reserve(&t, Family::Poisson).map_err(CliError::engine("model A"))?;
        models.push(glm_row(&a, size, "Poisson macro GLM"));
    }
    if want(ModelTag::B) {
        let (_, b) = reserve::macro_reserve(&t, Family::QuasiPoisson).map_err(CliError::engine("model B"))?;
        models.push(glm_row(&b, size, "quasi-Poisson macro GLM"));
    }
    let cumulative = t.to_cumulative().map_err(CliError::engine("cumulating the triangle"))?;
    let mack = reserve::mack(&cumulative).map_err(CliError::engine("Mack chain ladder"))?;
    models.push(ModelRow {
        model: "Mack".into(),
        description: "Mack chain ladder",
        reserve: mack.reserve,
        msep: mack.msep,
        sqrt_msep: mack.sqrt_msep,
        dispersion: None,
        origin_reserves: mack.origin_reserves.clone(),
    });

    let mut csv = String::from("model,reserve,msep,sqrt_msep,dispersion\n");
    for m in &models {
        let phi = m.dispersion.map(|d| d.to_string()).unwrap_or_default();
        writeln!(csv, "{},{},{},{},{}", m.model, m.reserve, m.msep, m.sqrt_msep, phi).unwrap();
    }
    let results = FitResults {
        models,
        development_factors: mack.factors.clone(),
        mack_sigma2: mack.sigma2.clone(),
        mack_origin_sqrt_msep: mack.origin_msep.iter().map(|m| m.sqrt()).collect(),
    };
    Ok(Rendered {
        json: serde_json::to_value(&results)?,
        csv,
        figure: None,
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MacroReference {
    pub best_estimate: f64,
    pub sqrt_msep: f64,
    pub dispersion: f64,
}

fn macro_reference(t: &Triangle) -> Result<MacroReference, CliError> {
    let (fit, est) = reserve::macro_reserve(t, Family::QuasiPoisson).map_err(CliError::engine("model B"))?;
    Ok(MacroReference {
        best_estimate: est.best_estimate,
        sqrt_msep: est.sqrt_msep.unwrap_or(f64::NAN),
        dispersion: fit.covariance_dispersion().map_err(CliError::engine("model B"))?,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateResults {
    pub variant: Variant,
    pub macro_reference: MacroReference,
    /// Expected payments where the mean micro sqrt(MSEP) crosses the macro value.
    pub crossover_payments: Option<f64>,
    pub sweep: Vec<SimSummary>,
}

fn sim_config(config: &RunConfig, theta: f64) -> SimConfig {
    let mut sim = SimConfig::new(config.micro_variant(), theta, config.replicates, config.seed);
    sim.rho = config.rho;
    sim
}

pub fn simulate(config: &RunConfig) -> Result<Rendered, CliError> {
    let t = load(config)?;
    let reference = macro_reference(&t)?;
    let sweep = config
        .thetas
        .iter()
        .map(|&theta| {
            microsim::run_experiment(&t, &sim_config(config, theta))
                .map_err(CliError::engine(format!("simulation at theta {theta}")))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut csv = String::from(
        "theta,replicate,payments,best_estimate,msep,sqrt_msep,dispersion,pearson_dispersion,drift,psi,threshold_payments,micro_more_precise\n",
    );
    for s in &sweep {
        for r in &s.records {
            writeln!(
                csv,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                s.config.theta,
                r.replicate,
                r.payments,
                r.best_estimate,
                r.msep,
                r.sqrt_msep,
                r.dispersion,
                r.pearson_dispersion,
                r.drift,
                r.psi.psi,
                r.psi.threshold_payments,
                r.psi.micro_more_precise
            )
            .unwrap();
        }
    }
    let figure = if config.figure_out.is_some() {
        let mut buf = Vec::new();
        microsim::emit_figure_data(&sweep, &mut buf).map_err(CliError::engine("figure data"))?;
        Some(String::from_utf8(buf).expect("figure data is ASCII"))
    } else {
        None
    };
    let results = SimulateResults {
        variant: config.micro_variant(),
        macro_reference: reference,
        crossover_payments: microsim::crossover(&sweep, reference.sqrt_msep),
        sweep,
    };
    Ok(Rendered {
        json: serde_json::to_value(&results)?,
        csv,
        figure,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MixedResults {
    pub macro_reference: MacroReference,
    pub runs: Vec<MixedSummary>,
}

pub fn mixed(config: &RunConfig) -> Result<Rendered, CliError> {
    let t = load(config)?;
    let reference = macro_reference(&t)?;
    let runs = config
        .thetas
        .iter()
        .map(|&theta| {
            let cfg = MixedConfig {
                draws: config.draws,
                bootstrap: config.bootstrap,
                ..MixedConfig::new(theta, config.replicates, config.seed)
            };
            mixed::run_mixed_experiment(&t, &cfg)
                .map_err(CliError::engine(format!("mixed experiment at theta {theta}")))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut csv = String::from(
        "theta,replicate,payments,claims,sigma2,lrt_statistic,p_value,unconditional_reserve,unconditional_sqrt_var,conditional_reserve,conditional_sqrt_var\n",
    );
    for run in &runs {
        for r in &run.records {
            writeln!(
                csv,
                "{},{},{},{},{},{},{},{},{},{},{}",
                run.config.theta,
                r.replicate,
                r.payments,
                r.claims,
                r.sigma2,
                r.lrt.statistic,
                r.lrt.p_value,
                r.unconditional_reserve,
                r.unconditional_sqrt_var,
                r.conditional_reserve,
                r.conditional_sqrt_var
            )
            .unwrap();
        }
    }
    let figure = if config.figure_out.is_some() {
        let mut out = format!("theta,{}\n", mixed::CELL_FIGURE_HEADER);
        for run in &runs {
            let mut buf = Vec::new();
            mixed::emit_cell_figure_data(&run.figure_rows, &mut buf).map_err(CliError::engine("figure data"))?;
            for line in String::from_utf8(buf).expect("figure data is ASCII").lines().skip(1) {
                writeln!(out, "{},{line}", run.config.theta).unwrap();
            }
        }
        Some(out)
    } else {
        None
    };
    Ok(Rendered {
        json: serde_json::to_value(&MixedResults {
            macro_reference: reference,
            runs,
        })?,
        csv,
        figure,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LrtResults {
    pub records: Vec<LrtRecord>,
    /// Share of tests with asymptotic p-value below 0.05.
    pub share_significant: f64,
}

pub fn lrt(config: &RunConfig) -> Result<Rendered, CliError> {
    let t = load(config)?;
    let mut records = Vec::new();
    for &theta in &config.thetas {
        let batch = (0..config.replicates)
            .into_par_iter()
            .map(|r| {
                mixed::lrt_replicate(&t, theta, config.seed, r, config.bootstrap)
                    .map_err(CliError::engine(format!("test at theta {theta}, replicate {r}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        records.extend(batch);
    }
    let mut csv = String::from("theta,replicate,payments,claims,sigma2,statistic,p_value,bootstrap_p_value\n");
    for r in &records {
        let boot = r.test.bootstrap.map(|b| b.p_value.to_string()).unwrap_or_default();
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.theta, r.replicate, r.payments, r.claims, r.sigma2, r.test.statistic, r.test.p_value, boot
        )
        .unwrap();
    }
    let significant = records.iter().filter(|r| r.test.p_value < 0.05).count();
    let results = LrtResults {
        share_significant: significant as f64 / records.len() as f64,
        records,
    };
    Ok(Rendered {
        json: serde_json::to_value(&results)?,
        csv,
        figure: None,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SplitResults {
    pub theta: f64,
    pub variant: Variant,
    pub replicate: usize,
    /// Amount lost to flooring.
    pub drift: f64,
    pub payments: Vec<Payment>,
}

pub fn split(config: &RunConfig) -> Result<Rendered, CliError> {
    let t = load(config)?;
    let theta = config.thetas[0];
    let sim = sim_config(config, theta);
    let data = microsim::replicate_dataset(&t, &sim, config.replicate)
        .map_err(CliError::engine("disaggregation"))?;
    let results = SplitResults {
        theta,
        variant: sim.variant,
        replicate: config.replicate,
        drift: data.drift(&t),
        payments: data.payments().to_vec(),
    };
    Ok(Rendered {
        json: serde_json::to_value(&results)?,
        csv: data.to_csv(),
        figure: None,
    })
}
