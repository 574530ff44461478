//! Poisson regression with a claim-level random intercept.
//!
//! Row `r` belongs to claim `t(r)`, and given `gamma_t ~ N(0, sigma2)` its
//! response is Poisson with mean `exp(x_r^T c + o_r + gamma_t)`. The marginal
//! likelihood is approximated claim by claim with a one-point Laplace rule
//! around the conditional mode `gamma_hat_t`, which solves
//! `S_y - exp(gamma) S_mu - gamma / sigma2 = 0` with `S_y = sum y_r`,
//! `S_mu = sum exp(x_r^T c + o_r)` over the claim's rows. Writing
//! `A_t = exp(gamma_hat_t) S_mu`, claim `t` contributes
//! `sum_r [y_r (eta_r + gamma_hat_t) - ln y_r!] - A_t - gamma_hat_t^2 / (2 sigma2) - ln(1 + sigma2 A_t) / 2`.
//!
//! `c` is maximized by Newton steps for fixed `sigma2`; `sigma2` by a
//! log-scale grid refined with golden-section search. `sigma2 = 0` is kept
//! unless an interior value improves the likelihood, in which case the
//! boundary fit is the plain Poisson GLM.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::glm::{self, Family, GlmFit, GlmSpec};
use crate::linalg::spd_inverse;
use crate::microsim::{self, MicroDataset, ReplicateFailure, SimConfig, Variant};
use crate::reserve::{self, future_row, CellPrediction, ModelTag, ReserveEstimate};
use crate::triangle::{Cell, CellIndexSets, Triangle};

/// Default Monte-Carlo draws for the reserve variance.
pub const DEFAULT_PREDICTION_DRAWS: usize = 2000;
/// Default parametric bootstrap size for the variance-component test.
pub const DEFAULT_BOOTSTRAP_REPLICATES: usize = 200;
/// Allowed shortfall of the mixed log-likelihood below the fixed-effects one.
pub const NESTING_TOLERANCE: f64 = 1e-6;

const LOG10_SIGMA2_MIN: f64 = -8.0;
const LOG10_SIGMA2_MAX: f64 = 1.5;
const LOG10_SIGMA2_CAP: f64 = 4.0;
const GRID_STEP: f64 = 0.25;

/// Marginal mean and variance of `Y | gamma ~ Poisson(exp(lp + gamma))`, `gamma ~ N(0, sigma2)`.
/// Returns NaNs for negative `sigma2`.
pub fn marginal_moments(linear_predictor: f64, sigma2: f64) -> (f64, f64) {
    if !(sigma2 >= 0.0) {
        return (f64::NAN, f64::NAN);
    }
    let mean = (linear_predictor + sigma2 / 2.0).exp();
    (mean, mean * (1.0 + mean * sigma2.exp_m1()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedSpec {
    design: DMatrix<f64>,
    response: DVector<f64>,
    offset: DVector<f64>,
    /// Dense claim index per row.
    claim_index: Vec<usize>,
    /// External claim id for each dense index, ascending.
    claim_ids: Vec<usize>,
    /// Rows per dense claim index.
    rows_by_claim: Vec<Vec<usize>>,
}

impl MixedSpec {
    pub fn new(
        design: DMatrix<f64>,
        response: DVector<f64>,
        offset: DVector<f64>,
        claims: &[usize],
    ) -> Result<Self> {
        Self::with_roster(design, response, offset, claims, &[])
    }

    /// As [`MixedSpec::new`], also registering claims in `roster` that have no rows;
    /// their predicted effect is the prior mode 0.
    pub fn with_roster(
        design: DMatrix<f64>,
        response: DVector<f64>,
        offset: DVector<f64>,
        claims: &[usize],
        roster: &[usize],
    ) -> Result<Self> {
        let n = design.nrows();
        if response.len() != n || offset.len() != n || claims.len() != n {
            return Err(Error::Dimension(format!(
                "design has {n} rows, response/offset/claims have {}/{}/{}",
                response.len(),
                offset.len(),
                claims.len()
            )));
        }
        if n == 0 {
            return Err(Error::InvalidInput("no rows".into()));
        }
        if response.iter().any(|y| !(*y >= 0.0) || !y.is_finite()) {
            return Err(Error::InvalidInput("responses must be finite and non-negative".into()));
        }
        if design.iter().chain(offset.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("design and offset must be finite".into()));
        }
        let mut claim_ids: Vec<usize> = claims.iter().chain(roster).copied().collect();
        claim_ids.sort_unstable();
        claim_ids.dedup();
        let dense: BTreeMap<usize, usize> = claim_ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
        let claim_index: Vec<usize> = claims.iter().map(|id| dense[id]).collect();
        let mut rows_by_claim = vec![Vec::new(); claim_ids.len()];
        for (r, &k) in claim_index.iter().enumerate() {
            rows_by_claim[k].push(r);
        }
        Ok(MixedSpec {
            design,
            response,
            offset,
            claim_index,
            claim_ids,
            rows_by_claim,
        })
    }

    /// Payment rows of a dataset whose payments all carry a claim id.
    pub fn from_dataset(data: &MicroDataset) -> Result<Self> {
        let glm_spec = data.glm_spec(Family::Poisson)?;
        let claims = data
            .payments()
            .iter()
            .enumerate()
            .map(|(r, p)| {
                p.claim
                    .ok_or_else(|| Error::InvalidInput(format!("payment {r} has no claim id")))
            })
            .collect::<Result<Vec<_>>>()?;
        let roster: Vec<usize> = data.claims_by_origin().iter().flatten().copied().collect();
        MixedSpec::with_roster(
            glm_spec.design().clone(),
            glm_spec.response().clone(),
            glm_spec.offset().clone(),
            &claims,
            &roster,
        )
    }

    pub fn rows(&self) -> usize {
        self.design.nrows()
    }

    pub fn params(&self) -> usize {
        self.design.ncols()
    }

    /// Registered claims, including those without rows.
    pub fn claim_count(&self) -> usize {
        self.claim_ids.len()
    }

    /// Claims with at least one row.
    pub fn observed_claim_count(&self) -> usize {
        self.rows_by_claim.iter().filter(|r| !r.is_empty()).count()
    }

    pub fn claim_ids(&self) -> &[usize] {
        &self.claim_ids
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn response(&self) -> &DVector<f64> {
        &self.response
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    /// The same rows without the random intercept.
    pub fn fixed_spec(&self) -> Result<GlmSpec> {
        GlmSpec::new(self.design.clone(), self.response.clone(), self.offset.clone(), Family::Poisson)
    }

    /// Copy with a new response vector.
    pub fn with_response(&self, response: DVector<f64>) -> Result<MixedSpec> {
        if response.len() != self.rows() {
            return Err(Error::Dimension("response length differs from the design".into()));
        }
        Ok(MixedSpec { response, ..self.clone() })
    }
}

/// Solves `sy - exp(g) smu - g / sigma2 = 0`; the left side is concave and decreasing in `g`.
fn conditional_mode(sy: f64, smu: f64, sigma2: f64) -> f64 {
    if smu == 0.0 && sy == 0.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (-sigma2 * smu, sigma2 * sy);
    let f = |g: f64| sy - g.exp() * smu - g / sigma2;
    let mut g = ((sy.max(0.5)) / smu).ln().clamp(lo, hi);
    for _ in 0..200 {
        let val = f(g);
        if val > 0.0 {
            lo = g;
        } else {
            hi = g;
        }
        let slope = -(g.exp() * smu + 1.0 / sigma2);
        let mut next = g - val / slope;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - g).abs() <= 1e-14 * (1.0 + g.abs()) {
            return next;
        }
        g = next;
    }
    g
}

/// Conditional modes `gamma_hat_t` at fixed effects `c` and variance `sigma2`, indexed like `claim_ids`.
pub fn conditional_modes(spec: &MixedSpec, c: &DVector<f64>, sigma2: f64) -> Result<Vec<f64>> {
    if c.len() != spec.params() {
        return Err(Error::Dimension("coefficient length differs from the design".into()));
    }
    if !(sigma2 >= 0.0) {
        return Err(Error::InvalidInput(format!("variance {sigma2} must be >= 0")));
    }
    Ok(evaluate(spec, c, sigma2).gammas)
}

#[derive(Debug, Clone)]
struct Evaluation {
    loglik: f64,
    gradient: DVector<f64>,
    information: DMatrix<f64>,
    gammas: Vec<f64>,
    /// `A_t = exp(gamma_hat_t) S_mu`.
    a: Vec<f64>,
}

fn evaluate(spec: &MixedSpec, c: &DVector<f64>, sigma2: f64) -> Evaluation {
    let p = spec.params();
    let eta = &spec.design * c + &spec.offset;
    let mu = eta.map(|e| e.min(700.0).exp());
    let mut loglik = 0.0;
    let mut gradient = DVector::zeros(p);
    let mut information = DMatrix::zeros(p, p);
    let mut gammas = vec![0.0; spec.claim_count()];
    let mut a_values = vec![0.0; spec.claim_count()];
    for (t, rows) in spec.rows_by_claim.iter().enumerate() {
        let sy: f64 = rows.iter().map(|&r| spec.response[r]).sum();
        let smu: f64 = rows.iter().map(|&r| mu[r]).sum();
        let gamma = if sigma2 > 0.0 { conditional_mode(sy, smu, sigma2) } else { 0.0 };
        let scale = gamma.exp();
        let a = scale * smu;
        let mut u = DVector::zeros(p);
        for &r in rows {
            let y = spec.response[r];
            let m = mu[r] * scale;
            let x = spec.design.row(r).transpose();
            loglik += y * (eta[r] + gamma) - ln_gamma(y + 1.0);
            gradient.axpy(y - m, &x, 1.0);
            information.ger(m, &x, &x, 1.0);
            u.axpy(m, &x, 1.0);
        }
        loglik -= a;
        if sigma2 > 0.0 {
            let k = 1.0 + sigma2 * a;
            loglik -= gamma * gamma / (2.0 * sigma2) + 0.5 * k.ln();
            gradient.axpy(-0.5 * sigma2 / (k * k), &u, 1.0);
            information.ger(-sigma2 / k, &u, &u, 1.0);
        }
        gammas[t] = gamma;
        a_values[t] = a;
    }
    Evaluation {
        loglik,
        gradient,
        information,
        gammas,
        a: a_values,
    }
}

struct InnerFit {
    coefficients: DVector<f64>,
    eval: Evaluation,
    converged: bool,
}

/// Maximizes the Laplace log-likelihood over `c` at fixed `sigma2`.
fn maximize_fixed_effects(spec: &MixedSpec, start: &DVector<f64>, sigma2: f64) -> InnerFit {
    let mut c = start.clone();
    let mut eval = evaluate(spec, &c, sigma2);
    for _ in 0..200 {
        let Ok(inv) = spd_inverse(&eval.information) else {
            return InnerFit { coefficients: c, eval, converged: false };
        };
        let step = &inv * &eval.gradient;
        let decrement = eval.gradient.dot(&step);
        let tol = 1e-10 * (1.0 + eval.loglik.abs());
        if decrement < tol {
            return InnerFit { coefficients: c, eval, converged: true };
        }
        let mut factor = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let trial = &c + &step * factor;
            let trial_eval = evaluate(spec, &trial, sigma2);
            if trial_eval.loglik.is_finite() && trial_eval.loglik >= eval.loglik {
                c = trial;
                eval = trial_eval;
                improved = true;
                break;
            }
            factor *= 0.5;
        }
        if !improved {
            // No representable ascent left; accept when the decrement is already at rounding level.
            let converged = decrement < 1e-6 * (1.0 + eval.loglik.abs());
            return InnerFit { coefficients: c, eval, converged };
        }
    }
    InnerFit { coefficients: c, eval, converged: false }
}

#[derive(Debug, Clone)]
pub struct MixedFit {
    /// Fixed effects `c_hat`.
    pub fixed_effects: DVector<f64>,
    pub sigma2: f64,
    /// Conditional modes `gamma_tilde_t`, indexed like `claim_ids`.
    pub random_effects: Vec<f64>,
    pub claim_ids: Vec<usize>,
    /// `1 / (A_t + 1 / sigma2)`, the Laplace variance of `gamma_t` given the data.
    pub conditional_variances: Vec<f64>,
    /// Laplace-approximated marginal log-likelihood at the optimum.
    pub log_likelihood: f64,
    /// Poisson log-likelihood of the fixed-effects fit on the same rows.
    pub fixed_log_likelihood: f64,
    /// Inverse observed information of `c` at the optimum.
    pub fixed_covariance: DMatrix<f64>,
    /// `d loglik / d sigma2` at `sigma2 = 0`: `sum_t [(S_y - S_mu)^2 - S_mu] / 2`.
    pub boundary_score: f64,
    pub on_boundary: bool,
    pub converged: bool,
    /// `(sigma2, profile log-likelihood)` for every evaluated variance.
    pub profile: Vec<(f64, f64)>,
}

impl MixedFit {
    pub fn random_effect(&self, claim: usize) -> Option<f64> {
        self.claim_ids
            .binary_search(&claim)
            .ok()
            .map(|k| self.random_effects[k])
    }

    /// Mean `lambda_r exp(gamma_tilde_t)` per row of `spec`.
    pub fn conditional_means(&self, spec: &MixedSpec) -> DVector<f64> {
        let eta = spec.design() * &self.fixed_effects + spec.offset();
        DVector::from_iterator(
            spec.rows(),
            eta.iter()
                .zip(&spec.claim_index)
                .map(|(e, &k)| (e + self.random_effects[k]).exp()),
        )
    }
}

fn boundary_score(spec: &MixedSpec, fixed: &GlmFit) -> f64 {
    spec.rows_by_claim
        .iter()
        .map(|rows| {
            let sy: f64 = rows.iter().map(|&r| spec.response[r]).sum();
            let smu: f64 = rows.iter().map(|&r| fixed.fitted[r]).sum();
            0.5 * ((sy - smu).powi(2) - smu)
        })
        .sum()
}

/// Maximum Laplace-approximated likelihood fit over `(c, sigma2 >= 0)`.
pub fn fit_mixed(spec: &MixedSpec) -> Result<MixedFit> {
    if spec.observed_claim_count() < 2 {
        return Err(Error::Identifiability(
            "at least two claims are needed to estimate the random-intercept variance".into(),
        ));
    }
    let fixed = glm::fit(&spec.fixed_spec()?)?;
    fit_mixed_from(spec, &fixed)
}

/// As [`fit_mixed`], reusing an existing fixed-effects Poisson fit on the same rows.
pub fn fit_mixed_from(spec: &MixedSpec, fixed: &GlmFit) -> Result<MixedFit> {
    if spec.observed_claim_count() < 2 {
        return Err(Error::Identifiability(
            "at least two claims are needed to estimate the random-intercept variance".into(),
        ));
    }
    if fixed.rows() != spec.rows() || fixed.params() != spec.params() {
        return Err(Error::Dimension("fixed-effects fit does not match the mixed rows".into()));
    }
    let fixed_loglik = fixed.log_likelihood();
    let score = boundary_score(spec, fixed);

    let mut profile = Vec::new();
    let mut best: Option<(f64, InnerFit)> = None;
    let mut start = fixed.coefficients.clone();
    let mut s = LOG10_SIGMA2_MIN;
    let mut grid = Vec::new();
    while s <= LOG10_SIGMA2_MAX + 1e-12 {
        grid.push(s);
        s += GRID_STEP;
    }
    let mut k = 0;
    while k < grid.len() {
        let sigma2 = 10f64.powf(grid[k]);
        let inner = maximize_fixed_effects(spec, &start, sigma2);
        profile.push((sigma2, inner.eval.loglik));
        start = inner.coefficients.clone();
        let better = best.as_ref().is_none_or(|(_, b)| inner.eval.loglik > b.eval.loglik);
        if better {
            best = Some((grid[k], inner));
        }
        // The profile may still be rising at the top of the grid.
        if k + 1 == grid.len() && better && grid[k] + GRID_STEP <= LOG10_SIGMA2_CAP {
            grid.push(grid[k] + GRID_STEP);
        }
        k += 1;
    }
    let (best_s, best_inner) = best.expect("grid is non-empty");

    let (lo, hi) = (
        (best_s - GRID_STEP).max(grid[0]),
        (best_s + GRID_STEP).min(*grid.last().unwrap()),
    );
    let golden = 0.5 * (5f64.sqrt() - 1.0);
    let warm = best_inner.coefficients.clone();
    let mut eval_at = |s: f64| {
        let sigma2 = 10f64.powf(s);
        let inner = maximize_fixed_effects(spec, &warm, sigma2);
        profile.push((sigma2, inner.eval.loglik));
        inner
    };
    let (mut a, mut b) = (lo, hi);
    let mut x1 = b - golden * (b - a);
    let mut x2 = a + golden * (b - a);
    let mut f1 = eval_at(x1);
    let mut f2 = eval_at(x2);
    for _ in 0..40 {
        if b - a < 1e-7 {
            break;
        }
        if f1.eval.loglik >= f2.eval.loglik {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - golden * (b - a);
            f1 = eval_at(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + golden * (b - a);
            f2 = eval_at(x2);
        }
    }
    let mut candidates = [(best_s, best_inner), (x1, f1), (x2, f2)];
    candidates.sort_by(|p, q| q.1.eval.loglik.total_cmp(&p.1.eval.loglik));
    let [(opt_s, opt), ..] = candidates;
    profile.sort_by(|p, q| p.0.total_cmp(&q.0));

    let margin = 1e-10 * fixed_loglik.abs() + 1e-9;
    if !(opt.eval.loglik > fixed_loglik + margin) {
        return Ok(MixedFit {
            fixed_effects: fixed.coefficients.clone(),
            sigma2: 0.0,
            random_effects: vec![0.0; spec.claim_count()],
            claim_ids: spec.claim_ids.clone(),
            conditional_variances: vec![0.0; spec.claim_count()],
            log_likelihood: fixed_loglik,
            fixed_log_likelihood: fixed_loglik,
            fixed_covariance: fixed.unscaled_covariance.clone(),
            boundary_score: score,
            on_boundary: true,
            converged: fixed.converged,
            profile,
        });
    }
    let sigma2 = 10f64.powf(opt_s);
    if !opt.converged {
        return Err(Error::Convergence {
            iterations: 200,
            message: format!("fixed effects did not converge at sigma2 = {sigma2:e}"),
            last_iterate: opt.coefficients.iter().copied().chain([sigma2]).collect(),
        });
    }
    let fixed_covariance = spd_inverse(&opt.eval.information)?;
    Ok(MixedFit {
        conditional_variances: opt.eval.a.iter().map(|a| 1.0 / (a + 1.0 / sigma2)).collect(),
        random_effects: opt.eval.gammas,
        fixed_effects: opt.coefficients,
        sigma2,
        claim_ids: spec.claim_ids.clone(),
        log_likelihood: opt.eval.loglik,
        fixed_log_likelihood: fixed_loglik,
        fixed_covariance,
        boundary_score: score,
        on_boundary: false,
        converged: true,
        profile,
    })
}

/// Residual of the conditional-mode equation for every claim, relative to `max(1, S_y)`.
pub fn conditional_mode_residuals(spec: &MixedSpec, fit: &MixedFit) -> Vec<f64> {
    if fit.sigma2 == 0.0 {
        return vec![0.0; spec.claim_count()];
    }
    let mu = (spec.design() * &fit.fixed_effects + spec.offset()).map(f64::exp);
    spec.rows_by_claim
        .iter()
        .zip(&fit.random_effects)
        .map(|(rows, g)| {
            let sy: f64 = rows.iter().map(|&r| spec.response[r]).sum();
            let smu: f64 = rows.iter().map(|&r| mu[r]).sum();
            (sy - g.exp() * smu - g / fit.sigma2) / sy.max(1.0)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapP {
    pub p_value: f64,
    pub replicates: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrtResult {
    /// `max(0, 2 (loglik_mixed - loglik_fixed))`.
    pub statistic: f64,
    /// Survival of the equal mixture of a point mass at 0 and chi-square(1); 1 at `statistic = 0`.
    pub p_value: f64,
    pub bootstrap: Option<BootstrapP>,
}

/// `P(chi2_1 >= t) / 2`, or 1 at `t = 0`.
pub fn mixture_p_value(statistic: f64) -> f64 {
    if statistic <= 0.0 {
        1.0
    } else {
        0.5 * erfc((statistic / 2.0).sqrt())
    }
}

pub fn lrt_variance(mixed: &MixedFit, fixed: &GlmFit) -> Result<LrtResult> {
    if fixed.params() != mixed.fixed_effects.len() {
        return Err(Error::Dimension("fits have different fixed-effect dimensions".into()));
    }
    let delta = mixed.log_likelihood - fixed.log_likelihood();
    if delta < -NESTING_TOLERANCE {
        return Err(Error::Optimizer(format!(
            "mixed log-likelihood {} is below the fixed-effects value {} by {}",
            mixed.log_likelihood,
            fixed.log_likelihood(),
            -delta
        )));
    }
    let statistic = (2.0 * delta).max(0.0);
    Ok(LrtResult {
        statistic,
        p_value: mixture_p_value(statistic),
        bootstrap: None,
    })
}

/// Parametric bootstrap of the test statistic under `sigma2 = 0`: responses
/// are redrawn from the fixed-effects means and both models refitted.
pub fn lrt_bootstrap(
    spec: &MixedSpec,
    fixed: &GlmFit,
    observed: &LrtResult,
    replicates: usize,
    seed: u64,
) -> Result<LrtResult> {
    if replicates == 0 {
        return Err(Error::InvalidInput("bootstrap needs at least one replicate".into()));
    }
    let outcomes: Vec<(usize, Result<f64>)> = (0..replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let mut run = || -> Result<f64> {
                let y = DVector::from_iterator(
                    spec.rows(),
                    fixed.fitted.iter().map(|&m| poisson_draw(m, &mut rng)),
                );
                let boot = spec.with_response(y)?;
                let boot_fixed = glm::fit(&boot.fixed_spec()?)?;
                let boot_mixed = fit_mixed_from(&boot, &boot_fixed)?;
                Ok(lrt_variance(&boot_mixed, &boot_fixed)?.statistic)
            };
            (b, run())
        })
        .collect();
    let (stats, failures) = microsim::partition_outcomes(outcomes, replicates)?;
    let exceed = stats.iter().filter(|&&t| t >= observed.statistic).count();
    Ok(LrtResult {
        bootstrap: Some(BootstrapP {
            p_value: exceed as f64 / stats.len() as f64,
            replicates: stats.len(),
            failures: failures.len(),
        }),
        ..*observed
    })
}

fn poisson_draw<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> f64 {
    if mean > 0.0 {
        Poisson::new(mean).map(|d| d.sample(rng)).unwrap_or(mean.round())
    } else {
        0.0
    }
}

/// Outcome of the variance test on one disaggregated replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrtRecord {
    pub theta: f64,
    pub replicate: usize,
    pub payments: usize,
    pub claims: usize,
    pub sigma2: f64,
    pub log_likelihood: f64,
    pub fixed_log_likelihood: f64,
    pub test: LrtResult,
}

/// Disaggregates replicate `replicate` of `seed` with claim allocation and
/// tests `sigma2 = 0`, bootstrapping when `bootstrap > 0`.
pub fn lrt_replicate(
    triangle: &Triangle,
    theta: f64,
    seed: u64,
    replicate: usize,
    bootstrap: usize,
) -> Result<LrtRecord> {
    let sim = SimConfig::new(Variant::G, theta, replicate + 1, seed);
    let mut rng = sim.replicate_rng(replicate);
    let data = microsim::disaggregate(triangle, &sim, &mut rng)?;
    let spec = MixedSpec::from_dataset(&data)?;
    let fixed = glm::fit(&spec.fixed_spec()?)?;
    let fit = fit_mixed_from(&spec, &fixed)?;
    let mut test = lrt_variance(&fit, &fixed)?;
    if bootstrap > 0 {
        test = lrt_bootstrap(&spec, &fixed, &test, bootstrap, rng.random())?;
    }
    Ok(LrtRecord {
        theta,
        replicate,
        payments: data.total_payments(),
        claims: spec.claim_count(),
        sigma2: fit.sigma2,
        log_likelihood: fit.log_likelihood,
        fixed_log_likelihood: fit.fixed_log_likelihood,
        test,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionMode {
    /// Future claim effects integrated over `N(0, sigma2)`.
    Unconditional,
    /// Future claim effects set to the fitted `gamma_tilde_t`.
    Conditional,
}

/// Where future payments go: the triangle size and the claims of each origin.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionLayout {
    pub size: usize,
    /// External claim ids per origin (index 0 is origin 1).
    pub claims_by_origin: Vec<Vec<usize>>,
}

impl PredictionLayout {
    pub fn from_dataset(data: &MicroDataset) -> Result<Self> {
        if data.claims_by_origin().len() != data.size() {
            return Err(Error::InvalidInput("dataset has no claim allocation".into()));
        }
        Ok(PredictionLayout {
            size: data.size(),
            claims_by_origin: data.claims_by_origin().to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedPrediction {
    pub mode: PredictionMode,
    /// `best_estimate` is the plug-in reserve; `msep` the Monte-Carlo total variance.
    pub estimate: ReserveEstimate,
    /// Variance of the simulated reserve mean over parameter and claim-effect draws.
    pub estimation_variance: f64,
    /// Mean of the simulated reserve means, the Poisson process variance.
    pub process_variance: f64,
    pub draws: usize,
}

/// `L` with `L L^T = cov`, negative eigenvalues clipped to zero.
fn covariance_root(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((cov + cov.transpose()) * 0.5);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

/// Future payments of origin `i` are shared equally by its claims, so cell
/// `g` has mean `exp(x_g^T c) * mean_t w_t`, with `w_t = exp(sigma2 / 2)`
/// (unconditional) or `exp(gamma_tilde_t)` (conditional).
///
/// The variance is `Var(R*) + E(R*)` over `draws` simulations of the mean
/// reserve `R*`: `c* ~ N(c_hat, cov)`, and `gamma*_t ~ N(0, sigma2)`
/// (unconditional) or `gamma*_t = gamma_tilde_t` (conditional).
pub fn predict(
    fit: &MixedFit,
    layout: &PredictionLayout,
    mode: PredictionMode,
    draws: usize,
    seed: u64,
) -> Result<MixedPrediction> {
    if draws < 2 {
        return Err(Error::InvalidInput("at least two Monte-Carlo draws are needed".into()));
    }
    if layout.claims_by_origin.len() != layout.size {
        return Err(Error::Dimension("layout lists claims for the wrong number of origins".into()));
    }
    let p = fit.fixed_effects.len();
    let cells: Vec<Cell> = CellIndexSets::new(layout.size).unobserved.into_iter().collect();
    let rows: Vec<DVector<f64>> = cells
        .iter()
        .map(|&cell| future_row(layout.size, cell, p))
        .collect::<Result<_>>()?;

    let fitted_gamma: Vec<Vec<f64>> = layout
        .claims_by_origin
        .iter()
        .map(|ids| {
            ids.iter()
                .map(|&id| match mode {
                    PredictionMode::Conditional => fit
                        .random_effect(id)
                        .ok_or_else(|| Error::InvalidInput(format!("claim {id} is not in the fit"))),
                    PredictionMode::Unconditional => Ok(0.0),
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let origin_weight = |gammas: &[f64]| -> f64 {
        if gammas.is_empty() {
            return 0.0;
        }
        gammas.iter().map(|g| g.exp()).sum::<f64>() / gammas.len() as f64
    };
    let plug_in_weights: Vec<f64> = match mode {
        PredictionMode::Unconditional => vec![(fit.sigma2 / 2.0).exp(); layout.size],
        PredictionMode::Conditional => fitted_gamma.iter().map(|g| origin_weight(g)).collect(),
    };
    let predictions: Vec<CellPrediction> = cells
        .iter()
        .zip(&rows)
        .map(|(&cell, x)| CellPrediction {
            cell,
            value: x.dot(&fit.fixed_effects).exp() * plug_in_weights[cell.origin - 1],
        })
        .collect();
    let best = predictions.iter().map(|p| p.value).sum::<f64>();

    let root = covariance_root(&fit.fixed_covariance);
    let sd = fit.sigma2.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut totals = Vec::with_capacity(draws);
    let mut gamma_draws: Vec<Vec<f64>> = fitted_gamma.clone();
    for _ in 0..draws {
        let z = DVector::from_iterator(p, (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let c = &fit.fixed_effects + &root * z;
        // Normals are drawn in both modes so the parameter draws coincide.
        for (origin, ids) in gamma_draws.iter_mut().enumerate() {
            for (k, g) in ids.iter_mut().enumerate() {
                let e: f64 = rng.sample(StandardNormal);
                *g = match mode {
                    PredictionMode::Unconditional => sd * e,
                    PredictionMode::Conditional => fitted_gamma[origin][k],
                };
            }
        }
        let weights: Vec<f64> = gamma_draws.iter().map(|g| origin_weight(g)).collect();
        let total: f64 = cells
            .iter()
            .zip(&rows)
            .map(|(cell, x)| x.dot(&c).exp() * weights[cell.origin - 1])
            .sum();
        totals.push(total);
    }
    let n = totals.len() as f64;
    let mean = totals.iter().sum::<f64>() / n;
    let estimation_variance = totals.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let msep = estimation_variance + mean;
    let tag = ModelTag::G;
    Ok(MixedPrediction {
        mode,
        estimate: ReserveEstimate {
            model: Some(tag),
            best_estimate: best,
            msep: Some(msep),
            sqrt_msep: Some(msep.sqrt()),
            predictions,
            dispersion: None,
        },
        estimation_variance,
        process_variance: mean,
        draws,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixedConfig {
    pub theta: f64,
    pub replicates: usize,
    pub seed: u64,
    /// Monte-Carlo draws per prediction.
    pub draws: usize,
    /// Bootstrap replicates per test; 0 disables the bootstrap.
    pub bootstrap: usize,
}

impl MixedConfig {
    pub fn new(theta: f64, replicates: usize, seed: u64) -> Self {
        MixedConfig {
            theta,
            replicates,
            seed,
            draws: DEFAULT_PREDICTION_DRAWS,
            bootstrap: 0,
        }
    }

    fn sim_config(&self) -> SimConfig {
        SimConfig::new(Variant::G, self.theta, self.replicates, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedRecord {
    pub replicate: usize,
    pub payments: usize,
    pub claims: usize,
    pub sigma2: f64,
    pub log_likelihood: f64,
    pub fixed_log_likelihood: f64,
    pub lrt: LrtResult,
    pub unconditional_reserve: f64,
    pub unconditional_sqrt_var: f64,
    pub unconditional_estimation_variance: f64,
    pub conditional_reserve: f64,
    pub conditional_sqrt_var: f64,
    pub conditional_estimation_variance: f64,
    /// Poisson process variance; the conditional value is reported, the
    /// unconditional one is within Monte-Carlo error of its reserve.
    pub process_variance: f64,
}

/// One row of the per-cell prediction data behind the observed and future cell plots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellFigureRow {
    pub replicate: usize,
    pub cell: Cell,
    /// Observed cell total, or `None` for future cells.
    pub observed: Option<f64>,
    pub macro_prediction: f64,
    pub conditional: f64,
    pub unconditional: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedSummary {
    pub config: MixedConfig,
    pub records: Vec<MixedRecord>,
    pub failures: Vec<ReplicateFailure>,
    pub mean_sigma2: f64,
    pub mean_unconditional_reserve: f64,
    pub mean_unconditional_sqrt_var: f64,
    pub mean_conditional_reserve: f64,
    pub mean_conditional_sqrt_var: f64,
    /// Share of replicates with asymptotic p-value below 0.05.
    pub share_significant: f64,
    pub macro_best_estimate: f64,
    pub macro_sqrt_msep: f64,
    /// Per-cell predictions of the first successful replicate.
    pub figure_rows: Vec<CellFigureRow>,
}

/// Observed and future cell predictions for one fitted replicate.
pub fn cell_figure_rows(
    replicate: usize,
    triangle: &Triangle,
    data: &MicroDataset,
    spec: &MixedSpec,
    fit: &MixedFit,
    macro_fit: &GlmFit,
    unconditional: &MixedPrediction,
    conditional: &MixedPrediction,
) -> Result<Vec<CellFigureRow>> {
    let size = triangle.size();
    let conditional_means = fit.conditional_means(spec);
    let mut conditional_by_cell: BTreeMap<Cell, f64> = BTreeMap::new();
    for (p, m) in data.payments().iter().zip(conditional_means.iter()) {
        *conditional_by_cell.entry(p.cell).or_insert(0.0) += m;
    }
    let uplift = (fit.sigma2 / 2.0).exp();
    let mut rows = Vec::new();
    for ((cell, y), macro_mean) in triangle.observed().zip(macro_fit.fitted.iter()) {
        let x = future_row(size, cell, fit.fixed_effects.len())?;
        rows.push(CellFigureRow {
            replicate,
            cell,
            observed: Some(y),
            macro_prediction: *macro_mean,
            conditional: conditional_by_cell.get(&cell).copied().unwrap_or(0.0),
            unconditional: x.dot(&fit.fixed_effects).exp() * uplift,
        });
    }
    let macro_future = reserve::best_estimate(macro_fit, &triangle.index_sets())?;
    for ((m, u), c) in macro_future
        .predictions
        .iter()
        .zip(&unconditional.estimate.predictions)
        .zip(&conditional.estimate.predictions)
    {
        rows.push(CellFigureRow {
            replicate,
            cell: m.cell,
            observed: None,
            macro_prediction: m.value,
            conditional: c.value,
            unconditional: u.value,
        });
    }
    Ok(rows)
}

pub const CELL_FIGURE_HEADER: &str = "replicate,origin,dev,observed,macro,conditional,unconditional";

pub fn emit_cell_figure_data<W: Write>(rows: &[CellFigureRow], mut out: W) -> Result<()> {
    writeln!(out, "{CELL_FIGURE_HEADER}")?;
    for r in rows {
        let observed = r.observed.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.replicate, r.cell.origin, r.cell.dev, observed, r.macro_prediction, r.conditional, r.unconditional
        )?;
    }
    Ok(())
}

struct ReplicateOutput {
    record: MixedRecord,
    figure: Vec<CellFigureRow>,
}

fn run_mixed_replicate(
    triangle: &Triangle,
    config: &MixedConfig,
    macro_fit: &GlmFit,
    replicate: usize,
) -> Result<ReplicateOutput> {
    let sim = config.sim_config();
    let mut rng = sim.replicate_rng(replicate);
    let data = microsim::disaggregate(triangle, &sim, &mut rng)?;
    let spec = MixedSpec::from_dataset(&data)?;
    let fixed = glm::fit(&spec.fixed_spec()?)?;
    let fit = fit_mixed_from(&spec, &fixed)?;
    let mut lrt = lrt_variance(&fit, &fixed)?;
    if config.bootstrap > 0 {
        lrt = lrt_bootstrap(&spec, &fixed, &lrt, config.bootstrap, rng.random())?;
    }
    let layout = PredictionLayout::from_dataset(&data)?;
    let prediction_seed: u64 = rng.random();
    let unconditional = predict(&fit, &layout, PredictionMode::Unconditional, config.draws, prediction_seed)?;
    let conditional = predict(&fit, &layout, PredictionMode::Conditional, config.draws, prediction_seed)?;
    let figure = cell_figure_rows(replicate, triangle, &data, &spec, &fit, macro_fit, &unconditional, &conditional)?;
    Ok(ReplicateOutput {
        record: MixedRecord {
            replicate,
            payments: data.total_payments(),
            claims: spec.claim_count(),
            sigma2: fit.sigma2,
            log_likelihood: fit.log_likelihood,
            fixed_log_likelihood: fit.fixed_log_likelihood,
            lrt,
            unconditional_reserve: unconditional.estimate.best_estimate,
            unconditional_sqrt_var: unconditional.estimate.sqrt_msep.unwrap_or(f64::NAN),
            unconditional_estimation_variance: unconditional.estimation_variance,
            conditional_reserve: conditional.estimate.best_estimate,
            conditional_sqrt_var: conditional.estimate.sqrt_msep.unwrap_or(f64::NAN),
            conditional_estimation_variance: conditional.estimation_variance,
            process_variance: conditional.process_variance,
        },
        figure,
    })
}

/// Disaggregates with claim allocation, fits the random-intercept model,
/// tests the variance and predicts the reserve in both modes, per replicate.
pub fn run_mixed_experiment(triangle: &Triangle, config: &MixedConfig) -> Result<MixedSummary> {
    config.sim_config().validate()?;
    if config.draws < 2 {
        return Err(Error::InvalidInput("at least two Monte-Carlo draws are needed".into()));
    }
    let (macro_fit, macro_est) = reserve::macro_reserve(triangle, Family::QuasiPoisson)?;
    let outcomes: Vec<(usize, Result<ReplicateOutput>)> = (0..config.replicates)
        .into_par_iter()
        .map(|r| (r, run_mixed_replicate(triangle, config, &macro_fit, r)))
        .collect();
    let (outputs, failures) = microsim::partition_outcomes(outcomes, config.replicates)?;
    let figure_rows = outputs[0].figure.clone();
    let records: Vec<MixedRecord> = outputs.into_iter().map(|o| o.record).collect();
    let n = records.len() as f64;
    let avg = |f: fn(&MixedRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    Ok(MixedSummary {
        config: *config,
        mean_sigma2: avg(|r| r.sigma2),
        mean_unconditional_reserve: avg(|r| r.unconditional_reserve),
        mean_unconditional_sqrt_var: avg(|r| r.unconditional_sqrt_var),
        mean_conditional_reserve: avg(|r| r.conditional_reserve),
        mean_conditional_sqrt_var: avg(|r| r.conditional_sqrt_var),
        share_significant: avg(|r| f64::from(u8::from(r.lrt.p_value < 0.05))),
        macro_best_estimate: macro_est.best_estimate,
        macro_sqrt_msep: macro_est.sqrt_msep.unwrap_or(f64::NAN),
        figure_rows,
        records,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn intercept_spec(groups: &[&[f64]]) -> MixedSpec {
        let mut y = Vec::new();
        let mut claims = Vec::new();
        for (t, g) in groups.iter().enumerate() {
            for v in *g {
                y.push(*v);
                claims.push(t * 10);
            }
        }
        let n = y.len();
        MixedSpec::new(DMatrix::from_element(n, 1, 1.0), DVector::from_vec(y), DVector::zeros(n), &claims)
            .unwrap()
    }

    #[test]
    fn moments_poisson_limit_and_plug_in() {
        let (m, v) = marginal_moments(3f64.ln(), 0.0);
        assert_relative_eq!(m, 3.0, max_relative = 1e-14);
        assert_relative_eq!(v, 3.0, max_relative = 1e-14);
        let s = 2f64.ln();
        let (m, v) = marginal_moments(-s / 2.0, s);
        assert_relative_eq!(m, 1.0, max_relative = 1e-14);
        assert_relative_eq!(v, 2.0, max_relative = 1e-14);
        assert!(marginal_moments(0.0, -1.0).0.is_nan());
    }

    #[test]
    fn conditional_mode_solves_equation() {
        for &(sy, smu, s2) in &[(0.0, 3.0, 0.5), (10.0, 1.0, 2.0), (1e6, 2e5, 1e-8), (5.0, 5.0, 30.0)] {
            let g = conditional_mode(sy, smu, s2);
            let r = sy - g.exp() * smu - g / s2;
            assert!(r.abs() <= 1e-9 * sy.max(1.0), "{sy} {smu} {s2}: {r}");
        }
    }

    #[test]
    fn single_claim_not_identifiable() {
        let spec = intercept_spec(&[&[1.0, 2.0, 3.0]]);
        assert!(matches!(fit_mixed(&spec), Err(Error::Identifiability(_))));
    }

    #[test]
    fn heterogeneous_claims_get_positive_variance_and_ordered_effects() {
        let spec = intercept_spec(&[&[1.0, 0.0, 2.0], &[30.0, 28.0, 35.0], &[8.0, 9.0, 7.0]]);
        let fit = fit_mixed(&spec).unwrap();
        assert!(fit.sigma2 > 0.0 && !fit.on_boundary);
        assert!(fit.random_effects[0] < fit.random_effects[2]);
        assert!(fit.random_effects[2] < fit.random_effects[1]);
        assert!(conditional_mode_residuals(&spec, &fit).iter().all(|r| r.abs() < 1e-8));
        let fixed = glm::fit(&spec.fixed_spec().unwrap()).unwrap();
        let lrt = lrt_variance(&fit, &fixed).unwrap();
        assert!(lrt.statistic > 10.0 && lrt.p_value < 0.01);
    }

    #[test]
    fn homogeneous_claims_stay_on_boundary() {
        let spec = intercept_spec(&[&[5.0, 5.0], &[5.0, 5.0], &[5.0, 5.0]]);
        let fit = fit_mixed(&spec).unwrap();
        assert!(fit.on_boundary);
        assert_eq!(fit.sigma2, 0.0);
        assert!(fit.random_effects.iter().all(|g| *g == 0.0));
        let fixed = glm::fit(&spec.fixed_spec().unwrap()).unwrap();
        assert_eq!(fit.log_likelihood, fixed.log_likelihood());
        let lrt = lrt_variance(&fit, &fixed).unwrap();
        assert_eq!(lrt.statistic, 0.0);
        assert_eq!(lrt.p_value, 1.0);
    }

    #[test]
    fn mixture_p_value_at_chi2_90_percent_quantile() {
        assert_relative_eq!(mixture_p_value(2.705543454095404), 0.05, max_relative = 1e-9);
        assert_eq!(mixture_p_value(0.0), 1.0);
    }

    #[test]
    fn nesting_violation_is_optimizer_error() {
        let spec = intercept_spec(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let fixed = glm::fit(&spec.fixed_spec().unwrap()).unwrap();
        let mut fit = fit_mixed_from(&spec, &fixed).unwrap();
        fit.log_likelihood = fixed.log_likelihood() - 1e-3;
        assert!(matches!(lrt_variance(&fit, &fixed), Err(Error::Optimizer(_))));
    }

    #[test]
    fn boundary_predictions_coincide_with_glm() {
        // 2x2 triangle, one claim per origin, identical payment pattern.
        let size = 2;
        let cells = [Cell::new(1, 1), Cell::new(1, 2), Cell::new(2, 1)];
        let x = DMatrix::from_fn(3, 3, |r, k| reserve::cross_classified_row(size, cells[r])[k]);
        let spec = MixedSpec::new(x, DVector::from_vec(vec![10.0, 10.0, 10.0]), DVector::zeros(3), &[0, 0, 1])
            .unwrap();
        let fixed = glm::fit(&spec.fixed_spec().unwrap()).unwrap();
        let fit = fit_mixed_from(&spec, &fixed).unwrap();
        assert!(fit.on_boundary);
        let layout = PredictionLayout { size, claims_by_origin: vec![vec![0], vec![1]] };
        let u = predict(&fit, &layout, PredictionMode::Unconditional, 200, 3).unwrap();
        let c = predict(&fit, &layout, PredictionMode::Conditional, 200, 3).unwrap();
        let glm_reserve = reserve::best_estimate(&fixed, &CellIndexSets::new(size)).unwrap();
        assert_relative_eq!(u.estimate.best_estimate, glm_reserve.best_estimate, max_relative = 1e-10);
        assert_eq!(u.estimate.best_estimate, c.estimate.best_estimate);
        assert_eq!(u.estimate.msep, c.estimate.msep);
    }

    #[test]
    fn unknown_claim_rejected_in_conditional_mode() {
        let spec = intercept_spec(&[&[1.0, 0.0, 2.0], &[30.0, 28.0, 35.0]]);
        let fit = fit_mixed(&spec).unwrap();
        let layout = PredictionLayout { size: 1, claims_by_origin: vec![vec![999]] };
        assert!(predict(&fit, &layout, PredictionMode::Conditional, 10, 1).is_err());
        assert!(predict(&fit, &layout, PredictionMode::Unconditional, 10, 1).is_ok());
    }

    #[test]
    fn bootstrap_p_value_in_unit_interval() {
        let spec = intercept_spec(&[&[1.0, 0.0, 2.0], &[3.0, 4.0, 2.0], &[2.0, 2.0, 1.0]]);
        let fixed = glm::fit(&spec.fixed_spec().unwrap()).unwrap();
        let fit = fit_mixed_from(&spec, &fixed).unwrap();
        let lrt = lrt_variance(&fit, &fixed).unwrap();
        let boot = lrt_bootstrap(&spec, &fixed, &lrt, 40, 9).unwrap();
        let b = boot.bootstrap.unwrap();
        assert!((0.0..=1.0).contains(&b.p_value));
        assert_eq!(b.replicates + b.failures, 40);
    }
}
