//! Monte-Carlo disaggregation of a triangle into individual payments.
//!
//! Each observed cell `g` receives `n_g` payments drawn from a zero-truncated
//! Poisson(theta); its amount `Y_g` is split by symmetric Dirichlet(1)
//! proportions `omega` into `floor(omega_k Y_g)`. The floor remainder is not
//! redistributed, so a cell loses at most `n_g - 1` currency units.
//!
//! Replicate `r` of an experiment draws from `ChaCha8Rng::seed_from_u64(seed)`
//! on stream `r`, which makes results independent of thread count and order.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{self, Family, GlmFit, GlmSpec, PsiDiagnostic};
use crate::reserve::{self, cross_classified_params, cross_classified_row, ModelTag};
use crate::triangle::{Cell, Triangle, TriangleKind};

/// Share of failed replicates above which an experiment is abandoned.
pub const MAX_FAILURE_SHARE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Payment {
    pub cell: Cell,
    /// Claim the payment belongs to; set only for variant G.
    pub claim: Option<usize>,
    pub amount: f64,
    pub covariate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroDataset {
    size: usize,
    /// Payments grouped by cell, cells in row-major order.
    payments: Vec<Payment>,
    counts: BTreeMap<Cell, usize>,
    /// Claim ids per origin (0-based origin index); empty unless claims were allocated.
    claims_by_origin: Vec<Vec<usize>>,
}

impl MicroDataset {
    /// Builds a dataset from explicit payments. Every observed cell of a
    /// size-`size` triangle needs at least one payment; claim ids, when all
    /// payments carry one, are grouped by origin.
    pub fn from_payments(size: usize, mut payments: Vec<Payment>) -> Result<Self> {
        let mut counts = BTreeMap::new();
        for (r, p) in payments.iter().enumerate() {
            if !p.cell.is_observed(size) {
                return Err(Error::InvalidInput(format!("payment {r} lies in unobserved cell {}", p.cell)));
            }
            if !(p.amount >= 0.0) || !p.amount.is_finite() {
                return Err(Error::InvalidInput(format!("payment {r} has amount {}", p.amount)));
            }
            *counts.entry(p.cell).or_insert(0usize) += 1;
        }
        let expected = size * (size + 1) / 2;
        if counts.len() != expected {
            return Err(Error::InvalidInput(format!(
                "{} of {expected} observed cells have payments",
                counts.len()
            )));
        }
        payments.sort_by_key(|p| p.cell);
        let mut claims_by_origin = Vec::new();
        if payments.iter().all(|p| p.claim.is_some()) {
            claims_by_origin = vec![Vec::new(); size];
            for p in &payments {
                let ids: &mut Vec<usize> = &mut claims_by_origin[p.cell.origin - 1];
                let id = p.claim.expect("checked above");
                if !ids.contains(&id) {
                    ids.push(id);
                }
            }
            claims_by_origin.iter_mut().for_each(|ids| ids.sort_unstable());
        }
        Ok(MicroDataset {
            size,
            payments,
            counts,
            claims_by_origin,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn payments(&self) -> &[Payment] {
        &self.payments
    }

    /// Payment count `n_{i,j}` per observed cell.
    pub fn counts(&self) -> &BTreeMap<Cell, usize> {
        &self.counts
    }

    pub fn total_payments(&self) -> usize {
        self.payments.len()
    }

    pub fn claims_by_origin(&self) -> &[Vec<usize>] {
        &self.claims_by_origin
    }

    pub fn claim_count(&self) -> usize {
        self.claims_by_origin.iter().map(Vec::len).sum()
    }

    pub fn has_covariate(&self) -> bool {
        self.payments.first().is_some_and(|p| p.covariate.is_some())
    }

    pub fn cell_totals(&self) -> BTreeMap<Cell, f64> {
        let mut totals = BTreeMap::new();
        for p in &self.payments {
            *totals.entry(p.cell).or_insert(0.0) += p.amount;
        }
        totals
    }

    /// Amount lost to flooring, `sum_g (Y_g - sum_k Y_g^(k))`.
    pub fn drift(&self, triangle: &Triangle) -> f64 {
        let totals = self.cell_totals();
        triangle
            .observed()
            .map(|(cell, y)| y - totals.get(&cell).copied().unwrap_or(0.0))
            .sum()
    }

    /// Cross-classified design with offset `log(1 / n_g)`, plus one column for the covariate when present.
    pub fn glm_spec(&self, family: Family) -> Result<GlmSpec> {
        let base = cross_classified_params(self.size);
        let with_cov = self.has_covariate();
        let p = base + usize::from(with_cov);
        let n = self.payments.len();
        let mut x = DMatrix::zeros(n, p);
        let mut offset = DVector::zeros(n);
        for (r, pay) in self.payments.iter().enumerate() {
            for (k, v) in cross_classified_row(self.size, pay.cell).into_iter().enumerate() {
                x[(r, k)] = v;
            }
            if with_cov {
                x[(r, base)] = pay.covariate.ok_or_else(|| {
                    Error::InvalidInput(format!("payment {r} has no covariate"))
                })?;
            }
            offset[r] = -(self.counts[&pay.cell] as f64).ln();
        }
        let y = DVector::from_iterator(n, self.payments.iter().map(|p| p.amount));
        GlmSpec::new(x, y, offset, family)
    }

    /// Covariate values per development period as one-column matrices, `None` without a covariate.
    pub fn covariates_by_dev(&self) -> Option<Vec<DMatrix<f64>>> {
        if !self.has_covariate() {
            return None;
        }
        let mut by_dev = vec![Vec::new(); self.size];
        for p in &self.payments {
            by_dev[p.cell.dev - 1].push(p.covariate?);
        }
        Some(by_dev.iter().map(|v| DMatrix::from_column_slice(v.len(), 1, v)).collect())
    }

    /// CSV dump: `origin,dev,claim,amount,covariate`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("origin,dev,claim,amount,covariate\n");
        for p in &self.payments {
            let claim = p.claim.map(|c| c.to_string()).unwrap_or_default();
            let cov = p.covariate.map(|c| format!("{c}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.cell.origin, p.cell.dev, claim, p.amount, cov
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Poisson micro model.
    C,
    /// Quasi-Poisson micro model.
    D,
    /// Quasi-Poisson micro model with a weakly correlated payment covariate.
    E,
    /// Quasi-Poisson micro model with a strongly correlated payment covariate.
    F,
    /// Poisson model with a claim-level random intercept.
    G,
}

impl Variant {
    pub fn tag(self) -> ModelTag {
        match self {
            Variant::C => ModelTag::C,
            Variant::D => ModelTag::D,
            Variant::E => ModelTag::E,
            Variant::F => ModelTag::F,
            Variant::G => ModelTag::G,
        }
    }

    pub fn family(self) -> Family {
        match self {
            Variant::C | Variant::G => Family::Poisson,
            Variant::D | Variant::E | Variant::F => Family::QuasiPoisson,
        }
    }

    /// Covariate correlation used when none is configured.
    pub fn default_rho(self) -> Option<f64> {
        match self {
            Variant::E => Some(0.0),
            Variant::F => Some(0.8),
            _ => None,
        }
    }
}

/// How claims are created for variant G.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaimsRule {
    /// Origin `i` has as many claims as cell `(i, 1)` has payments; every
    /// payment of that origin goes to one of them uniformly at random.
    FirstDevelopmentCount,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Mean number of payments per cluster.
    pub theta: f64,
    pub replicates: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Target covariate correlation for variants E and F.
    pub rho: Option<f64>,
    pub claims_rule: ClaimsRule,
}

impl SimConfig {
    pub fn new(variant: Variant, theta: f64, replicates: usize, seed: u64) -> Self {
        SimConfig {
            theta,
            replicates,
            seed,
            variant,
            rho: variant.default_rho(),
            claims_rule: ClaimsRule::FirstDevelopmentCount,
        }
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = Some(rho);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0) || !self.theta.is_finite() {
            return Err(Error::InvalidInput(format!("theta {} must be positive", self.theta)));
        }
        if self.replicates == 0 {
            return Err(Error::InvalidInput("at least one replicate is required".into()));
        }
        if let Some(rho) = self.rho {
            if !(-1.0..=1.0).contains(&rho) {
                return Err(Error::InvalidInput(format!("rho {rho} outside [-1, 1]")));
            }
        }
        if matches!(self.variant, Variant::E | Variant::F) && self.rho.is_none() {
            return Err(Error::InvalidInput("variants E and F need a covariate correlation".into()));
        }
        Ok(())
    }

    /// RNG for replicate `r`.
    pub fn replicate_rng(&self, replicate: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(replicate as u64);
        rng
    }
}

/// Splits `amount` into `n` floored Dirichlet(1) shares.
pub fn split_cluster<R: Rng + ?Sized>(amount: f64, n: usize, rng: &mut R) -> Vec<f64> {
    assert!(n >= 1, "a cluster needs at least one payment");
    if n == 1 {
        return vec![amount.floor()];
    }
    // Normalized unit exponentials are uniform on the simplex.
    let draws: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = draws.iter().sum();
    draws.iter().map(|e| (e / total * amount).floor()).collect()
}

/// Integer split of an integer `amount` into `n` Dirichlet(1) shares that
/// sum exactly to `amount`, rounding by largest remainder.
pub fn split_cluster_exact<R: Rng + ?Sized>(amount: f64, n: usize, rng: &mut R) -> Vec<f64> {
    assert!(n >= 1, "a cluster needs at least one payment");
    let draws: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = draws.iter().sum();
    let raw: Vec<f64> = draws.iter().map(|e| e / total * amount).collect();
    let mut parts: Vec<f64> = raw.iter().map(|v| v.floor()).collect();
    let missing = (amount - parts.iter().sum::<f64>()).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| (raw[b] - parts[b]).total_cmp(&(raw[a] - parts[a])));
    for &k in order.iter().take(missing) {
        parts[k] += 1.0;
    }
    parts
}

fn payment_count<R: Rng + ?Sized>(theta: f64, rng: &mut R) -> Result<usize> {
    let dist = Poisson::new(theta)
        .map_err(|e| Error::InvalidInput(format!("Poisson({theta}): {e}")))?;
    // Zero-truncated: an observed payment needs at least one payment.
    for _ in 0..10_000 {
        let n = dist.sample(rng) as usize;
        if n >= 1 {
            return Ok(n);
        }
    }
    Err(Error::InvalidInput(format!("theta {theta} too small to draw a positive count")))
}

pub fn disaggregate<R: Rng + ?Sized>(
    triangle: &Triangle,
    config: &SimConfig,
    rng: &mut R,
) -> Result<MicroDataset> {
    config.validate()?;
    if triangle.kind() != TriangleKind::Incremental {
        return Err(Error::KindMismatch {
            expected: TriangleKind::Incremental,
            found: triangle.kind(),
        });
    }
    let mut payments = Vec::new();
    let mut counts = BTreeMap::new();
    for (cell, amount) in triangle.observed() {
        if amount < 0.0 {
            return Err(Error::InvalidInput(format!("cell {cell} is negative")));
        }
        let n = if amount == 0.0 { 1 } else { payment_count(config.theta, rng)? };
        counts.insert(cell, n);
        payments.extend(split_cluster(amount, n, rng).into_iter().map(|a| Payment {
            cell,
            claim: None,
            amount: a,
            covariate: None,
        }));
    }

    let mut claims_by_origin = Vec::new();
    if config.variant == Variant::G {
        let size = triangle.size();
        let mut next_id = 0;
        for origin in 1..=size {
            let m = counts[&Cell::new(origin, 1)];
            claims_by_origin.push((next_id..next_id + m).collect::<Vec<_>>());
            next_id += m;
        }
        for p in &mut payments {
            let ids = &claims_by_origin[p.cell.origin - 1];
            p.claim = Some(ids[rng.random_range(0..ids.len())]);
        }
    }

    Ok(MicroDataset {
        size: triangle.size(),
        payments,
        counts,
        claims_by_origin,
    })
}

/// Adds a payment covariate whose correlation with `log(amount + 1)` is close to `rho`:
/// `z = rho s + sqrt(1 - rho^2) e`, with `s` the standardized log-amount and `e` standard normal.
pub fn attach_covariate<R: Rng + ?Sized>(
    dataset: &MicroDataset,
    rho: f64,
    rng: &mut R,
) -> Result<MicroDataset> {
    if !(-1.0..=1.0).contains(&rho) {
        return Err(Error::InvalidInput(format!("rho {rho} outside [-1, 1]")));
    }
    let logs: Vec<f64> = dataset.payments.iter().map(|p| (p.amount + 1.0).ln()).collect();
    let n = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / n;
    let sd = (logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(sd > 0.0) && rho != 0.0 {
        return Err(Error::Degenerate(
            "all payment amounts are equal; no covariate can correlate with them".into(),
        ));
    }
    let noise_scale = (1.0 - rho * rho).max(0.0).sqrt();
    let mut out = dataset.clone();
    for (p, l) in out.payments.iter_mut().zip(&logs) {
        let s = if sd > 0.0 { (l - mean) / sd } else { 0.0 };
        let e: f64 = rng.sample(StandardNormal);
        p.covariate = Some(rho * s + noise_scale * e);
    }
    Ok(out)
}

/// Micro dataset for replicate `r`, including the covariate for variants E and F.
pub fn replicate_dataset(triangle: &Triangle, config: &SimConfig, replicate: usize) -> Result<MicroDataset> {
    let mut rng = config.replicate_rng(replicate);
    let data = disaggregate(triangle, config, &mut rng)?;
    match (config.variant, config.rho) {
        (Variant::E | Variant::F, Some(rho)) => attach_covariate(&data, rho, &mut rng),
        _ => Ok(data),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub payments: usize,
    pub best_estimate: f64,
    pub msep: f64,
    pub sqrt_msep: f64,
    /// Dispersion used in the MSEP (1 for variant C).
    pub dispersion: f64,
    /// Pearson dispersion of the micro fit, whatever the family.
    pub pearson_dispersion: f64,
    /// Amount lost to flooring.
    pub drift: f64,
    pub psi: PsiDiagnostic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub replicate: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub config: SimConfig,
    /// `theta * m`, the expected number of payments before zero truncation.
    pub expected_payments: f64,
    pub records: Vec<ReplicateRecord>,
    pub failures: Vec<ReplicateFailure>,
    pub mean_best_estimate: f64,
    pub mean_msep: f64,
    /// Standard deviation of the per-replicate MSEP.
    pub sd_msep: f64,
    /// `sqrt(mean_msep)`.
    pub sqrt_mean_msep: f64,
    pub mean_pearson_dispersion: f64,
    pub mean_payments: f64,
    pub mean_drift: f64,
    /// Macro quasi-Poisson dispersion and sqrt(MSEP) on the source triangle.
    pub macro_dispersion: f64,
    pub macro_sqrt_msep: f64,
    pub macro_best_estimate: f64,
}

fn run_replicate(
    triangle: &Triangle,
    config: &SimConfig,
    macro_fit: &GlmFit,
    replicate: usize,
) -> Result<ReplicateRecord> {
    let data = replicate_dataset(triangle, config, replicate)?;
    let spec = data.glm_spec(config.variant.family())?;
    let fit = glm::fit(&spec)?;
    let phi = fit.covariance_dispersion()?;
    let est = match data.covariates_by_dev() {
        Some(z) => reserve::msep_with_covariates(&fit, &triangle.index_sets(), phi, &z)?,
        None => reserve::msep_unconditional(&fit, &triangle.index_sets(), phi)?,
    };
    let msep = est.msep.unwrap_or(0.0);
    Ok(ReplicateRecord {
        replicate,
        payments: data.total_payments(),
        best_estimate: est.best_estimate,
        msep,
        sqrt_msep: msep.sqrt(),
        dispersion: phi,
        pearson_dispersion: glm::pearson_dispersion(&fit, fit.params())?,
        drift: data.drift(triangle),
        psi: glm::psi_comparison(&fit, macro_fit)?,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Splits replicate results into records and failures, enforcing the failure budget.
pub(crate) fn partition_outcomes<T>(
    outcomes: Vec<(usize, Result<T>)>,
    requested: usize,
) -> Result<(Vec<T>, Vec<ReplicateFailure>)> {
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (replicate, outcome) in outcomes {
        match outcome {
            Ok(r) => records.push(r),
            Err(e) => failures.push(ReplicateFailure {
                replicate,
                error: e.to_string(),
            }),
        }
    }
    if failures.len() as f64 > MAX_FAILURE_SHARE * requested as f64 || records.is_empty() {
        return Err(Error::Experiment(format!(
            "{} of {requested} replicates failed (first: {})",
            failures.len(),
            failures.first().map(|f| f.error.as_str()).unwrap_or("none")
        )));
    }
    Ok((records, failures))
}

/// Runs the disaggregate / fit / reserve loop for variants C to F.
pub fn run_experiment(triangle: &Triangle, config: &SimConfig) -> Result<SimSummary> {
    config.validate()?;
    if config.variant == Variant::G {
        return Err(Error::InvalidInput(
            "variant G is driven by mixed::run_mixed_experiment".into(),
        ));
    }
    let (macro_fit, macro_est) = reserve::macro_reserve(triangle, Family::QuasiPoisson)?;

    let outcomes: Vec<(usize, Result<ReplicateRecord>)> = (0..config.replicates)
        .into_par_iter()
        .map(|r| (r, run_replicate(triangle, config, &macro_fit, r)))
        .collect();
    let (records, failures) = partition_outcomes(outcomes, config.replicates)?;

    let mean_msep = mean(records.iter().map(|r| r.msep));
    let var_msep = if records.len() > 1 {
        records.iter().map(|r| (r.msep - mean_msep).powi(2)).sum::<f64>()
            / (records.len() - 1) as f64
    } else {
        0.0
    };
    Ok(SimSummary {
        config: *config,
        expected_payments: config.theta * triangle.observed().count() as f64,
        mean_best_estimate: mean(records.iter().map(|r| r.best_estimate)),
        mean_msep,
        sd_msep: var_msep.sqrt(),
        sqrt_mean_msep: mean_msep.sqrt(),
        mean_pearson_dispersion: mean(records.iter().map(|r| r.pearson_dispersion)),
        mean_payments: mean(records.iter().map(|r| r.payments as f64)),
        mean_drift: mean(records.iter().map(|r| r.drift)),
        macro_dispersion: macro_fit.covariance_dispersion()?,
        macro_sqrt_msep: macro_est.sqrt_msep.unwrap_or(f64::NAN),
        macro_best_estimate: macro_est.best_estimate,
        records,
        failures,
    })
}

/// Runs one experiment per `theta`, all other settings shared.
pub fn run_sweep(triangle: &Triangle, base: &SimConfig, thetas: &[f64]) -> Result<Vec<SimSummary>> {
    thetas
        .iter()
        .map(|&theta| run_experiment(triangle, &SimConfig { theta, ..*base }))
        .collect()
}

/// Expected payment count where the sweep's sqrt(MSEP) curve first crosses `reference`,
/// by linear interpolation between neighbouring sweep points.
pub fn crossover(sweep: &[SimSummary], reference: f64) -> Option<f64> {
    let mut points: Vec<(f64, f64)> = sweep
        .iter()
        .map(|s| (s.expected_payments, s.sqrt_mean_msep))
        .collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    points.windows(2).find_map(|w| {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        let (d0, d1) = (y0 - reference, y1 - reference);
        if d0 == 0.0 {
            Some(x0)
        } else if d0.signum() != d1.signum() {
            Some(x0 + (x1 - x0) * d0 / (d0 - d1))
        } else {
            None
        }
    })
}

pub const FIGURE_HEADER: &str = "variant,theta,expected_payments,replicates,sqrt_msep,msep_mean,msep_lower,msep_upper,mean_best_estimate,macro_sqrt_msep";

/// Writes one row per sweep point: sqrt of the mean MSEP, the mean MSEP with
/// +-2 replicate standard deviation bands, and the macro reference line.
pub fn emit_figure_data<W: Write>(sweep: &[SimSummary], mut out: W) -> Result<()> {
    if sweep.len() < 2 {
        return Err(Error::InvalidInput("figure data needs at least two sweep points".into()));
    }
    writeln!(out, "{FIGURE_HEADER}")?;
    for s in sweep {
        writeln!(
            out,
            "{:?},{},{},{},{},{},{},{},{},{}",
            s.config.variant,
            s.config.theta,
            s.expected_payments,
            s.records.len(),
            s.sqrt_mean_msep,
            s.mean_msep,
            s.mean_msep - 2.0 * s.sd_msep,
            s.mean_msep + 2.0 * s.sd_msep,
            s.mean_best_estimate,
            s.macro_sqrt_msep
        )?;
    }
    Ok(())
}
