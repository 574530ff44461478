//! Reserve best estimates and their mean square error of prediction.
//!
//! Models A to D are the cross-classified log-linear models
//! `log E[Y_{i,j}] = b_i + b_{I+j}` with `b_{I+1} = 0`, fitted on the triangle
//! cells (A: Poisson, B: quasi-Poisson) or on individual payments with offset
//! `log(1 / n_{i,j})` (C: Poisson, D: quasi-Poisson). Models E and F add
//! payment-level covariates to D. Model G is the random-intercept model of
//! [`crate::mixed`].
//!
//! Unobserved cells are predicted with unit exposure: the macro prediction is
//! `exp(b_i + b_{I+j})`, and the micro prediction sums `n_{i,j}` payments each
//! carrying exposure `1 / n_{i,j}`, which lands on the same number. With
//! payment covariates ([`msep_with_covariates`]) a future cell is scaled by the
//! mean of `exp(z^T delta)` over the observed payments of its development
//! period; evaluating at the covariate mean instead would bias the reserve
//! down by roughly `delta^2 Var(z) / 2`.
//! The micro exposure convention has no behavioural justification; it exists
//! so that micro and macro reserves coincide.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{self, Family, GlmFit, GlmSpec, PsiDiagnostic};
use crate::triangle::{Cell, CellIndexSets, Triangle, TriangleKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelTag {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
}

impl fmt::Display for ModelTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Number of coefficients of the cross-classified design, `2I - 1`.
pub fn cross_classified_params(size: usize) -> usize {
    2 * size - 1
}

/// Design row of cell `(i, j)`: origin indicators `1..=I`, then development
/// indicators for `j = 2..=I` (the first development level is the reference).
pub fn cross_classified_row(size: usize, cell: Cell) -> Vec<f64> {
    let mut row = vec![0.0; cross_classified_params(size)];
    row[cell.origin - 1] = 1.0;
    if cell.dev >= 2 {
        row[size + cell.dev - 2] = 1.0;
    }
    row
}

/// Macro-level GLM over the observed cells of an incremental triangle.
pub fn macro_spec(triangle: &Triangle, family: Family) -> Result<GlmSpec> {
    if triangle.kind() != TriangleKind::Incremental {
        return Err(Error::KindMismatch {
            expected: TriangleKind::Incremental,
            found: triangle.kind(),
        });
    }
    let size = triangle.size();
    let cells: Vec<(Cell, f64)> = triangle.observed().collect();
    let p = cross_classified_params(size);
    let mut x = DMatrix::zeros(cells.len(), p);
    for (r, (cell, _)) in cells.iter().enumerate() {
        for (k, v) in cross_classified_row(size, *cell).into_iter().enumerate() {
            x[(r, k)] = v;
        }
    }
    let y = DVector::from_iterator(cells.len(), cells.iter().map(|(_, v)| *v));
    GlmSpec::new(x, y, DVector::zeros(cells.len()), family)
}

pub fn fit_macro(triangle: &Triangle, family: Family) -> Result<GlmFit> {
    glm::fit(&macro_spec(triangle, family)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellPrediction {
    pub cell: Cell,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReserveEstimate {
    pub model: Option<ModelTag>,
    /// Sum of the predictions over the unobserved cells.
    pub best_estimate: f64,
    pub msep: Option<f64>,
    pub sqrt_msep: Option<f64>,
    pub predictions: Vec<CellPrediction>,
    pub dispersion: Option<f64>,
}

impl ReserveEstimate {
    pub fn with_model(mut self, model: ModelTag) -> Self {
        self.model = Some(model);
        self
    }

    pub fn cells(&self) -> BTreeSet<Cell> {
        self.predictions.iter().map(|p| p.cell).collect()
    }

    /// Per-origin totals of the predictions, indexed by `origin - 1`.
    pub fn by_origin(&self, size: usize) -> Vec<f64> {
        let mut out = vec![0.0; size];
        for p in &self.predictions {
            out[p.cell.origin - 1] += p.value;
        }
        out
    }
}

/// Design row for a future cell under a fit with `params` coefficients.
pub(crate) fn future_row(size: usize, cell: Cell, params: usize) -> Result<DVector<f64>> {
    let base = cross_classified_params(size);
    if params < base {
        return Err(Error::Dimension(format!(
            "fit has {params} coefficients, a size-{size} triangle needs at least {base}"
        )));
    }
    let mut row = cross_classified_row(size, cell);
    row.resize(params, 0.0);
    Ok(DVector::from_vec(row))
}

fn check_sets(fit: &GlmFit, sets: &CellIndexSets) -> Result<()> {
    if fit.params() < cross_classified_params(sets.size) {
        return Err(Error::Dimension(format!(
            "fit has {} coefficients but the cell sets describe a size-{} triangle",
            fit.params(),
            sets.size
        )));
    }
    Ok(())
}

fn predict_cells(fit: &GlmFit, size: usize, cells: &[Cell]) -> Result<Vec<(Cell, DVector<f64>, f64)>> {
    cells
        .iter()
        .map(|&cell| {
            let x = future_row(size, cell, fit.params())?;
            let value = x.dot(&fit.coefficients).exp();
            Ok((cell, x, value))
        })
        .collect()
}

/// Future cells predicted by averaging `exp(z^T delta)` over the observed
/// covariate rows `z` of the same development period.
///
/// Returns per cell the gradient direction (cross-classified row, then the
/// `exp(z^T delta)`-weighted covariate mean) and the predicted value.
fn predict_cells_smeared(
    fit: &GlmFit,
    size: usize,
    cells: &[Cell],
    by_dev: &[DMatrix<f64>],
) -> Result<Vec<(Cell, DVector<f64>, f64)>> {
    let base = cross_classified_params(size);
    if by_dev.len() != size {
        return Err(Error::Dimension(format!(
            "{} covariate samples for {size} development periods",
            by_dev.len()
        )));
    }
    let q = fit.params().checked_sub(base).unwrap_or(0);
    if fit.params() != base + q || q == 0 {
        return Err(Error::Dimension(format!(
            "fit has {} coefficients, expected {base} cross-classified plus covariate columns",
            fit.params()
        )));
    }
    let delta = fit.coefficients.rows(base, q);
    let smear = |z: &DMatrix<f64>| -> Result<(f64, DVector<f64>)> {
        if z.nrows() == 0 || z.ncols() != q || !z.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "covariate samples must be non-empty, finite and {q} columns wide"
            )));
        }
        let weights = (z * delta).map(f64::exp);
        let total = weights.sum();
        Ok((total / z.nrows() as f64, z.transpose() * &weights / total))
    };
    let smeared = by_dev.iter().map(smear).collect::<Result<Vec<_>>>()?;
    cells
        .iter()
        .map(|&cell| {
            let (factor, weighted_mean) = &smeared[cell.dev - 1];
            let mut x = future_row(size, cell, fit.params())?;
            let value = x.rows(0, base).dot(&fit.coefficients.rows(0, base)).exp() * factor;
            x.rows_mut(base, q).copy_from(weighted_mean);
            Ok((cell, x, value))
        })
        .collect()
}

pub fn best_estimate(fit: &GlmFit, sets: &CellIndexSets) -> Result<ReserveEstimate> {
    check_sets(fit, sets)?;
    let cells: Vec<Cell> = sets.unobserved.iter().copied().collect();
    let predicted = predict_cells(fit, sets.size, &cells)?;
    let predictions: Vec<CellPrediction> = predicted
        .iter()
        .map(|(cell, _, value)| CellPrediction { cell: *cell, value: *value })
        .collect();
    Ok(ReserveEstimate {
        model: None,
        best_estimate: predictions.iter().map(|p| p.value).sum(),
        msep: None,
        sqrt_msep: None,
        predictions,
        dispersion: None,
    })
}

/// Unconditional MSEP of the reserve over the unobserved cells:
/// `sum phi yhat_a + sum_{a,b} phi yhat_a yhat_b x_a^T (X^T W X)^{-1} x_b`.
pub fn msep_unconditional(fit: &GlmFit, sets: &CellIndexSets, phi: f64) -> Result<ReserveEstimate> {
    check_sets(fit, sets)?;
    let cells: Vec<Cell> = sets.unobserved.iter().copied().collect();
    msep_for_cells(fit, sets.size, &cells, phi)
}

/// MSEP over an arbitrary set of future cells; covariate columns beyond the
/// cross-classified block are evaluated at 0.
pub fn msep_for_cells(fit: &GlmFit, size: usize, cells: &[Cell], phi: f64) -> Result<ReserveEstimate> {
    check_msep_inputs(fit, phi)?;
    Ok(assemble_msep(predict_cells(fit, size, cells)?, &fit.unscaled_covariance, phi))
}

/// Unconditional MSEP for a fit with payment covariates. Future payments in
/// development period `j` take their covariates from the observed payments of
/// period `j` (`by_dev[j - 1]`), so a future cell is predicted by
/// `exp(x^T b) mean_r exp(z_r^T delta)`; the samples are held fixed in the
/// delta-method estimation error.
pub fn msep_with_covariates(
    fit: &GlmFit,
    sets: &CellIndexSets,
    phi: f64,
    by_dev: &[DMatrix<f64>],
) -> Result<ReserveEstimate> {
    check_sets(fit, sets)?;
    check_msep_inputs(fit, phi)?;
    let cells: Vec<Cell> = sets.unobserved.iter().copied().collect();
    let predicted = predict_cells_smeared(fit, sets.size, &cells, by_dev)?;
    Ok(assemble_msep(predicted, &fit.unscaled_covariance, phi))
}

fn check_msep_inputs(fit: &GlmFit, phi: f64) -> Result<()> {
    if !(phi >= 0.0) || !phi.is_finite() {
        return Err(Error::InvalidInput(format!("dispersion {phi} must be finite and >= 0")));
    }
    if !fit.unscaled_covariance.iter().all(|v| v.is_finite()) {
        return Err(Error::Singular("coefficient covariance is not finite".into()));
    }
    Ok(())
}

/// `phi sum yhat_a + phi g^T C g` with `g = sum_a yhat_a x_a`.
fn assemble_msep(predicted: Vec<(Cell, DVector<f64>, f64)>, cov: &DMatrix<f64>, phi: f64) -> ReserveEstimate {
    let process: f64 = predicted.iter().map(|(_, _, v)| phi * v).sum();
    let mut gradient = DVector::zeros(cov.nrows());
    for (_, x, y) in &predicted {
        gradient.axpy(*y, x, 1.0);
    }
    let estimation = phi * gradient.dot(&(cov * &gradient));
    let msep = process + estimation;
    let predictions: Vec<CellPrediction> = predicted
        .iter()
        .map(|(cell, _, value)| CellPrediction { cell: *cell, value: *value })
        .collect();
    ReserveEstimate {
        model: None,
        best_estimate: predictions.iter().map(|p| p.value).sum(),
        msep: Some(msep),
        sqrt_msep: Some(msep.max(0.0).sqrt()),
        predictions,
        dispersion: Some(phi),
    }
}

/// Fits a macro model on the triangle and returns its reserve with MSEP.
/// Poisson uses `phi = 1`, quasi-Poisson the macro Pearson dispersion.
pub fn macro_reserve(triangle: &Triangle, family: Family) -> Result<(GlmFit, ReserveEstimate)> {
    let fit = fit_macro(triangle, family)?;
    let phi = fit.covariance_dispersion()?;
    let tag = match family {
        Family::Poisson => ModelTag::A,
        Family::QuasiPoisson => ModelTag::B,
    };
    let est = msep_unconditional(&fit, &triangle.index_sets(), phi)?.with_model(tag);
    Ok((fit, est))
}

/// Chain-ladder development with Mack's distribution-free MSEP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MackFit {
    /// Volume-weighted development factors `f_1 .. f_{I-1}`.
    pub factors: Vec<f64>,
    /// Variance parameters `sigma^2_1 .. sigma^2_{I-1}`.
    pub sigma2: Vec<f64>,
    /// Projected ultimates `C_{i,I}` per origin.
    pub ultimates: Vec<f64>,
    pub origin_reserves: Vec<f64>,
    pub origin_msep: Vec<f64>,
    pub reserve: f64,
    pub msep: f64,
    pub sqrt_msep: f64,
}

pub fn mack(triangle: &Triangle) -> Result<MackFit> {
    if triangle.kind() != TriangleKind::Cumulative {
        return Err(Error::KindMismatch {
            expected: TriangleKind::Cumulative,
            found: triangle.kind(),
        });
    }
    let size = triangle.size();
    if size < 2 {
        return Err(Error::InvalidInput("Mack's model needs at least two periods".into()));
    }
    let c = triangle.rows();
    // 0-based development index k links column k to k + 1 using rows 0..size-k-1.
    let n_factors = size - 1;
    let mut factors = Vec::with_capacity(n_factors);
    let mut column_sums = Vec::with_capacity(n_factors);
    for k in 0..n_factors {
        let rows = size - k - 1;
        let den: f64 = (0..rows).map(|i| c[i][k]).sum();
        let num: f64 = (0..rows).map(|i| c[i][k + 1]).sum();
        if den == 0.0 {
            return Err(Error::Degenerate(format!(
                "development column {} sums to zero",
                k + 1
            )));
        }
        factors.push(num / den);
        column_sums.push(den);
    }

    let mut sigma2 = Vec::with_capacity(n_factors);
    for k in 0..n_factors {
        let rows = size - k - 1;
        if rows >= 2 {
            let ss: f64 = (0..rows)
                .filter(|&i| c[i][k] != 0.0)
                .map(|i| c[i][k] * (c[i][k + 1] / c[i][k] - factors[k]).powi(2))
                .sum();
            sigma2.push(ss / (rows - 1) as f64);
        } else {
            // Last factor rests on one row; extrapolate.
            let tail = match k {
                0 => 0.0,
                1 => sigma2[0],
                _ => {
                    let last = sigma2[k - 1];
                    let prev = sigma2[k - 2];
                    if prev > 0.0 {
                        (last * last / prev).min(prev.min(last))
                    } else {
                        0.0
                    }
                }
            };
            sigma2.push(tail);
        }
    }

    let mut full: Vec<Vec<f64>> = c.to_vec();
    for (i, row) in full.iter_mut().enumerate() {
        for k in (size - i)..size {
            let prev = row[k - 1];
            row.push(prev * factors[k - 1]);
        }
    }
    let ultimates: Vec<f64> = full.iter().map(|r| r[size - 1]).collect();
    let origin_reserves: Vec<f64> = (0..size)
        .map(|i| ultimates[i] - c[i][c[i].len() - 1])
        .collect();

    // Origin i (0-based) is projected through factors k = size-1-i .. size-2.
    let ratio = |k: usize| sigma2[k] / factors[k].powi(2);
    let origin_msep: Vec<f64> = (0..size)
        .map(|i| {
            let mut s = 0.0;
            for k in (size - 1 - i)..n_factors {
                s += ratio(k) * (1.0 / full[i][k] + 1.0 / column_sums[k]);
            }
            ultimates[i].powi(2) * s
        })
        .collect();

    let mut msep: f64 = origin_msep.iter().sum();
    for i in 1..size {
        let later: f64 = ultimates[i + 1..].iter().sum();
        let est: f64 = ((size - 1 - i)..n_factors)
            .map(|k| 2.0 * ratio(k) / column_sums[k])
            .sum();
        msep += ultimates[i] * later * est;
    }

    Ok(MackFit {
        reserve: origin_reserves.iter().sum(),
        sqrt_msep: msep.max(0.0).sqrt(),
        factors,
        sigma2,
        ultimates,
        origin_reserves,
        origin_msep,
        msep,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MicroMacroComparison {
    pub macro_best_estimate: f64,
    pub micro_best_estimate: f64,
    /// Best estimates agree to 1e-6 relative.
    pub best_estimates_match: bool,
    pub macro_sqrt_msep: f64,
    pub micro_sqrt_msep: f64,
    /// `macro sqrt(MSEP) - micro sqrt(MSEP)`; positive when the micro model is more precise.
    pub sqrt_msep_gap: f64,
    /// Whether the threshold verdict agrees with the sign of the gap, when a diagnostic was given.
    pub psi_consistent: Option<bool>,
}

pub fn compare_micro_macro(
    macro_est: &ReserveEstimate,
    micro_est: &ReserveEstimate,
    psi: Option<&PsiDiagnostic>,
) -> Result<MicroMacroComparison> {
    if macro_est.cells() != micro_est.cells() {
        return Err(Error::Dimension("macro and micro estimates cover different cells".into()));
    }
    let (Some(macro_sqrt), Some(micro_sqrt)) = (macro_est.sqrt_msep, micro_est.sqrt_msep) else {
        return Err(Error::InvalidInput("both estimates need an MSEP".into()));
    };
    let scale = macro_est.best_estimate.abs().max(micro_est.best_estimate.abs()).max(1e-300);
    let rel = (macro_est.best_estimate - micro_est.best_estimate).abs() / scale;
    let gap = macro_sqrt - micro_sqrt;
    Ok(MicroMacroComparison {
        macro_best_estimate: macro_est.best_estimate,
        micro_best_estimate: micro_est.best_estimate,
        best_estimates_match: rel <= 1e-6 || macro_est.best_estimate == micro_est.best_estimate,
        macro_sqrt_msep: macro_sqrt,
        micro_sqrt_msep: micro_sqrt,
        sqrt_msep_gap: gap,
        psi_consistent: psi.map(|d| d.micro_more_precise == (gap >= 0.0)),
    })
}
