//! Poisson and quasi-Poisson regression with log link and offsets.
//!
//! Coefficients come from iteratively reweighted least squares on the Poisson
//! score equations `sum_r (y_r - lambda_r) x_r = 0`. Quasi-Poisson shares those
//! equations, so it differs from Poisson only through the Pearson dispersion
//! that scales the coefficient covariance `phi (X^T W X)^{-1}`, `W = diag(lambda)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::weighted_least_squares;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Poisson,
    QuasiPoisson,
}

#[derive(Debug, Clone)]
pub struct GlmSpec {
    design: DMatrix<f64>,
    response: DVector<f64>,
    offset: DVector<f64>,
    family: Family,
}

impl GlmSpec {
    pub fn new(
        design: DMatrix<f64>,
        response: DVector<f64>,
        offset: DVector<f64>,
        family: Family,
    ) -> Result<Self> {
        let (n, p) = design.shape();
        if response.len() != n || offset.len() != n {
            return Err(Error::Dimension(format!(
                "design has {n} rows, response {} and offset {}",
                response.len(),
                offset.len()
            )));
        }
        if p == 0 {
            return Err(Error::InvalidInput("design has no columns".into()));
        }
        if n < p {
            return Err(Error::InvalidInput(format!("{n} rows cannot identify {p} coefficients")));
        }
        if response.iter().any(|y| !(y.is_finite() && *y >= 0.0)) {
            return Err(Error::InvalidInput("responses must be finite and non-negative".into()));
        }
        if offset.iter().chain(design.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("design and offsets must be finite".into()));
        }
        Ok(GlmSpec {
            design,
            response,
            offset,
            family,
        })
    }

    /// Same rows and design with every offset set to zero.
    pub fn without_offset(&self) -> GlmSpec {
        GlmSpec {
            offset: DVector::zeros(self.rows()),
            ..self.clone()
        }
    }

    pub fn with_family(&self, family: Family) -> GlmSpec {
        GlmSpec {
            family,
            ..self.clone()
        }
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

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn rows(&self) -> usize {
        self.design.nrows()
    }

    pub fn params(&self) -> usize {
        self.design.ncols()
    }

    /// `exp(X b + offset)`.
    pub fn means(&self, coefficients: &DVector<f64>) -> DVector<f64> {
        let eta = &self.design * coefficients + &self.offset;
        eta.map(|e| e.min(700.0).exp())
    }

    /// Poisson score `sum_r (y_r - lambda_r) x_r` at `coefficients`.
    pub fn score(&self, coefficients: &DVector<f64>) -> DVector<f64> {
        let resid = &self.response - self.means(coefficients);
        self.design.transpose() * resid
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrlsConfig {
    pub max_iterations: usize,
    /// Relative deviance change that ends the iteration.
    pub tolerance: f64,
}

impl Default for IrlsConfig {
    fn default() -> Self {
        IrlsConfig {
            max_iterations: 50,
            tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GlmFit {
    pub family: Family,
    pub coefficients: DVector<f64>,
    /// Fitted means `lambda_hat` per row.
    pub fitted: DVector<f64>,
    pub response: DVector<f64>,
    /// `sum_r (y_r - lambda_r)^2 / lambda_r`.
    pub pearson_statistic: f64,
    /// Pearson dispersion over `rows - params`; `None` for saturated fits.
    pub pearson_dispersion: Option<f64>,
    /// `(X^T W X)^{-1}`, `W = diag(lambda_hat)`.
    pub unscaled_covariance: DMatrix<f64>,
    pub deviance: f64,
    /// Deviance after each iteration.
    pub deviance_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl GlmFit {
    pub fn rows(&self) -> usize {
        self.fitted.len()
    }

    pub fn params(&self) -> usize {
        self.coefficients.len()
    }

    /// Dispersion used for inference: 1 for Poisson, Pearson for quasi-Poisson.
    pub fn covariance_dispersion(&self) -> Result<f64> {
        match self.family {
            Family::Poisson => Ok(1.0),
            Family::QuasiPoisson => self.pearson_dispersion.ok_or_else(|| {
                Error::Degenerate("no residual degrees of freedom for the Pearson dispersion".into())
            }),
        }
    }

    /// Poisson log-likelihood at the fitted means, including the `ln y!` term.
    pub fn log_likelihood(&self) -> f64 {
        poisson_log_likelihood(&self.response, &self.fitted)
    }
}

/// `sum_r y_r ln(lambda_r) - lambda_r - ln Gamma(y_r + 1)`.
pub fn poisson_log_likelihood(response: &DVector<f64>, means: &DVector<f64>) -> f64 {
    response
        .iter()
        .zip(means.iter())
        .map(|(&y, &mu)| {
            let log_term = if y > 0.0 { y * mu.ln() } else { 0.0 };
            log_term - mu - statrs::function::gamma::ln_gamma(y + 1.0)
        })
        .sum()
}

/// Poisson deviance `2 sum [y ln(y / mu) - (y - mu)]`.
pub fn poisson_deviance(response: &DVector<f64>, means: &DVector<f64>) -> f64 {
    2.0 * response
        .iter()
        .zip(means.iter())
        .map(|(&y, &mu)| {
            let ratio = if y > 0.0 { y * (y / mu).ln() } else { 0.0 };
            ratio - (y - mu)
        })
        .sum::<f64>()
}

pub fn fit(spec: &GlmSpec) -> Result<GlmFit> {
    fit_with(spec, &IrlsConfig::default())
}

pub fn fit_with(spec: &GlmSpec, config: &IrlsConfig) -> Result<GlmFit> {
    let x = &spec.design;
    let y = &spec.response;
    let (n, p) = x.shape();

    // A non-negative column whose rows all carry y = 0 pushes its coefficient to -inf.
    for k in 0..p {
        let col = x.column(k);
        if col.iter().all(|v| *v >= 0.0) && col.iter().any(|v| *v > 0.0) {
            let total: f64 = col.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
            if total == 0.0 {
                return Err(Error::Singular(format!(
                    "column {k} has zero total response; its level is not identifiable"
                )));
            }
        }
    }
    let mean_y = y.mean();
    if mean_y <= 0.0 {
        return Err(Error::Singular("all responses are zero".into()));
    }

    // Start from the constant linear predictor log(mean y) - log(mean exp(offset)),
    // projected onto the column space of the design.
    let mean_exposure = spec.offset.iter().map(|o| o.exp()).sum::<f64>() / n as f64;
    let start = (mean_y / mean_exposure).ln();
    let mut beta = weighted_least_squares(
        x,
        &DVector::from_element(n, start),
        &DVector::from_element(n, 1.0),
    )?
    .coefficients;

    let mut mu = spec.means(&beta);
    let mut deviance = poisson_deviance(y, &mu);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < config.max_iterations {
        iterations += 1;
        let eta_no_offset = x * &beta;
        let z = DVector::from_iterator(
            n,
            (0..n).map(|r| eta_no_offset[r] + (y[r] - mu[r]) / mu[r]),
        );
        let candidate = weighted_least_squares(x, &z, &mu)?.coefficients;

        // Step halving keeps the deviance non-increasing.
        let mut step = candidate - &beta;
        let mut accepted = None;
        for _ in 0..40 {
            let trial = &beta + &step;
            let trial_mu = spec.means(&trial);
            let trial_dev = poisson_deviance(y, &trial_mu);
            if trial_dev.is_finite() && trial_dev <= deviance + 1e-12 * deviance.abs().max(1.0) {
                accepted = Some((trial, trial_mu, trial_dev));
                break;
            }
            step *= 0.5;
        }
        let Some((new_beta, new_mu, new_dev)) = accepted else {
            return Err(Error::Convergence {
                iterations,
                message: "step halving failed to reduce the deviance".into(),
                last_iterate: beta.iter().copied().collect(),
            });
        };
        let change = (deviance - new_dev).abs() / (new_dev.abs() + 0.1);
        beta = new_beta;
        mu = new_mu;
        deviance = new_dev;
        trace.push(deviance);
        if change < config.tolerance {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Convergence {
            iterations,
            message: format!("relative deviance change still above {:e}", config.tolerance),
            last_iterate: beta.iter().copied().collect(),
        });
    }

    let unscaled_covariance =
        weighted_least_squares(x, &DVector::zeros(n), &mu)?.unscaled_covariance;
    let pearson_statistic = pearson_statistic(y, &mu)?;
    let pearson_dispersion = (n > p).then(|| pearson_statistic / (n - p) as f64);

    Ok(GlmFit {
        family: spec.family,
        coefficients: beta,
        fitted: mu,
        response: y.clone(),
        pearson_statistic,
        pearson_dispersion,
        unscaled_covariance,
        deviance,
        deviance_trace: trace,
        iterations,
        converged,
    })
}

fn pearson_statistic(y: &DVector<f64>, mu: &DVector<f64>) -> Result<f64> {
    let mut total = 0.0;
    for (r, (&obs, &fit)) in y.iter().zip(mu.iter()).enumerate() {
        if fit <= 0.0 {
            if obs != 0.0 {
                return Err(Error::Degenerate(format!(
                    "row {r} has fitted mean 0 but response {obs}"
                )));
            }
            continue;
        }
        total += (obs - fit).powi(2) / fit;
    }
    Ok(total)
}

/// Pearson dispersion `sum (y - yhat)^2 / yhat / (rows - p_effective)`.
pub fn pearson_dispersion(fit: &GlmFit, p_effective: usize) -> Result<f64> {
    let rows = fit.rows();
    if rows <= p_effective {
        return Err(Error::InvalidInput(format!(
            "{rows} rows leave no degrees of freedom after {p_effective} parameters"
        )));
    }
    Ok(pearson_statistic(&fit.response, &fit.fitted)? / (rows - p_effective) as f64)
}

/// `phi (X^T W X)^{-1}` with `phi = 1` for Poisson and the Pearson dispersion for quasi-Poisson.
pub fn coefficient_covariance(fit: &GlmFit) -> Result<DMatrix<f64>> {
    Ok(&fit.unscaled_covariance * fit.covariance_dispersion()?)
}

/// Comparison of micro and macro Pearson dispersions through the ratio of
/// squared standardized residuals `Psi = sum r_{i,g}^2 / sum r_g^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsiDiagnostic {
    pub psi: f64,
    /// Number of micro rows, `sum n_g`.
    pub payments: usize,
    /// Number of macro rows `m`.
    pub clusters: usize,
    pub micro_params: usize,
    pub macro_params: usize,
    /// Payment count above which the micro dispersion is the smaller one,
    /// `Psi (m - p_macro) + p_micro`.
    pub threshold_payments: f64,
    pub micro_dispersion: f64,
    pub macro_dispersion: f64,
    /// Verdict of the threshold test: `sum n_g >= threshold`.
    pub micro_more_precise: bool,
}

pub fn psi_comparison(micro: &GlmFit, macro_fit: &GlmFit) -> Result<PsiDiagnostic> {
    let micro_stat = pearson_statistic(&micro.response, &micro.fitted)?;
    let macro_stat = pearson_statistic(&macro_fit.response, &macro_fit.fitted)?;
    if macro_stat <= 0.0 {
        return Err(Error::Degenerate("macro fit has zero Pearson statistic".into()));
    }
    let payments = micro.rows();
    let clusters = macro_fit.rows();
    let micro_params = micro.params();
    let macro_params = macro_fit.params();
    let psi = micro_stat / macro_stat;
    let threshold_payments =
        psi * (clusters as f64 - macro_params as f64) + micro_params as f64;
    Ok(PsiDiagnostic {
        psi,
        payments,
        clusters,
        micro_params,
        macro_params,
        threshold_payments,
        micro_dispersion: pearson_dispersion(micro, micro_params)?,
        macro_dispersion: pearson_dispersion(macro_fit, macro_params)?,
        micro_more_precise: payments as f64 >= threshold_payments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn intercept_spec(y: &[f64], family: Family) -> GlmSpec {
        GlmSpec::new(
            DMatrix::from_element(y.len(), 1, 1.0),
            DVector::from_row_slice(y),
            DVector::zeros(y.len()),
            family,
        )
        .unwrap()
    }

    #[test]
    fn saturated_single_row() {
        let fit = fit(&intercept_spec(&[7.0], Family::Poisson)).unwrap();
        assert_relative_eq!(fit.fitted[0], 7.0, max_relative = 1e-12);
        assert!(fit.pearson_dispersion.is_none());
        assert!(fit.converged);
    }

    #[test]
    fn intercept_variance_is_inverse_total_mean() {
        // Fisher information for a common mean: sum(lambda) = 6.
        let fit = fit(&intercept_spec(&[2.0, 4.0], Family::Poisson)).unwrap();
        let cov = coefficient_covariance(&fit).unwrap();
        assert_relative_eq!(cov[(0, 0)], 1.0 / 6.0, max_relative = 1e-10);

        let quasi = super::fit(&intercept_spec(&[2.0, 4.0], Family::QuasiPoisson)).unwrap();
        let phi = quasi.pearson_dispersion.unwrap();
        // ((2-3)^2 + (4-3)^2) / 3 / (2 - 1)
        assert_relative_eq!(phi, 2.0 / 3.0, max_relative = 1e-10);
        let qcov = coefficient_covariance(&quasi).unwrap();
        assert_relative_eq!(qcov[(0, 0)], cov[(0, 0)] * phi, max_relative = 1e-10);
    }

    #[test]
    fn perfect_fit_has_zero_dispersion() {
        let fit = fit(&intercept_spec(&[3.0, 3.0, 3.0], Family::QuasiPoisson)).unwrap();
        assert!(pearson_dispersion(&fit, 1).unwrap() < 1e-20);
        assert!(pearson_dispersion(&fit, 3).is_err());
    }

    #[test]
    fn zero_level_is_rank_deficient() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let spec = GlmSpec::new(
            x,
            DVector::from_vec(vec![2.0, 3.0, 0.0]),
            DVector::zeros(3),
            Family::Poisson,
        )
        .unwrap();
        assert!(matches!(super::fit(&spec), Err(Error::Singular(_))));
    }

    #[test]
    fn zero_rows_are_legal() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        let spec = GlmSpec::new(
            x,
            DVector::from_vec(vec![0.0, 4.0, 1.0, 5.0]),
            DVector::zeros(4),
            Family::Poisson,
        )
        .unwrap();
        let fit = super::fit(&spec).unwrap();
        assert_relative_eq!(fit.fitted[0], 2.0, max_relative = 1e-9);
        assert_relative_eq!(fit.fitted[2], 3.0, max_relative = 1e-9);
    }

    #[test]
    fn convergence_failure_reports_last_iterate() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        let spec = GlmSpec::new(
            x,
            DVector::from_vec(vec![1.0, 5.0, 40.0]),
            DVector::zeros(3),
            Family::Poisson,
        )
        .unwrap();
        let cfg = IrlsConfig { max_iterations: 1, tolerance: 1e-14 };
        match fit_with(&spec, &cfg) {
            Err(Error::Convergence { last_iterate, iterations, .. }) => {
                assert_eq!(iterations, 1);
                assert_eq!(last_iterate.len(), 2);
            }
            other => panic!("expected convergence error, got {other:?}"),
        }
    }

    #[test]
    fn spec_validation() {
        let x = DMatrix::from_element(2, 1, 1.0);
        assert!(GlmSpec::new(x.clone(), DVector::from_vec(vec![1.0, -1.0]), DVector::zeros(2), Family::Poisson).is_err());
        assert!(GlmSpec::new(x.clone(), DVector::from_vec(vec![1.0]), DVector::zeros(2), Family::Poisson).is_err());
        assert!(GlmSpec::new(x, DVector::from_vec(vec![1.0, 1.0]), DVector::from_vec(vec![0.0, f64::NAN]), Family::Poisson).is_err());
    }

    #[test]
    fn fitted_zero_with_positive_response_is_degenerate() {
        let y = DVector::from_vec(vec![1.0]);
        let mu = DVector::from_vec(vec![0.0]);
        assert!(matches!(pearson_statistic(&y, &mu), Err(Error::Degenerate(_))));
    }
}
