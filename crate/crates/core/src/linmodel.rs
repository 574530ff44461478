//! Least squares on clustered data.
//!
//! Every observation `y_{i,g}` in cluster `g` shares the cluster covariates
//! `x_g`. Fitting the `sum n_g` individual rows by ordinary least squares and
//! fitting the `m` cluster means with weights `n_g` give the same normal
//! equations, hence the same coefficients, the same prediction totals and the
//! same coefficient covariance (row variance `s2` on the micro side, cluster
//! variance `s2 / n_g` on the macro side).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::weighted_least_squares;

/// One cluster: its covariate row (leading 1 for the intercept) and its responses.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCluster {
    pub covariates: Vec<f64>,
    pub responses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredLinearData {
    clusters: Vec<LinearCluster>,
    width: usize,
}

impl ClusteredLinearData {
    pub fn new(clusters: Vec<LinearCluster>) -> Result<Self> {
        let width = clusters
            .first()
            .map(|c| c.covariates.len())
            .ok_or_else(|| Error::InvalidInput("no clusters".into()))?;
        if width == 0 {
            return Err(Error::InvalidInput("covariate rows are empty".into()));
        }
        for (g, c) in clusters.iter().enumerate() {
            if c.covariates.len() != width {
                return Err(Error::Dimension(format!(
                    "cluster {g} has {} covariates, expected {width}",
                    c.covariates.len()
                )));
            }
            if c.responses.is_empty() {
                return Err(Error::InvalidInput(format!("cluster {g} has no observations")));
            }
            if c.covariates.iter().chain(&c.responses).any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("cluster {g} holds non-finite values")));
            }
        }
        Ok(ClusteredLinearData { clusters, width })
    }

    pub fn clusters(&self) -> &[LinearCluster] {
        &self.clusters
    }

    /// Number of coefficients `k + 1`.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn total_rows(&self) -> usize {
        self.clusters.iter().map(|c| c.responses.len()).sum()
    }

    /// Row-level design: cluster `g`'s covariates repeated `n_g` times.
    pub fn micro_design(&self) -> DMatrix<f64> {
        let rows = self.total_rows();
        let mut x = DMatrix::zeros(rows, self.width);
        let mut r = 0;
        for c in &self.clusters {
            for _ in &c.responses {
                for (k, v) in c.covariates.iter().enumerate() {
                    x[(r, k)] = *v;
                }
                r += 1;
            }
        }
        x
    }

    /// Cluster-level design, one row per cluster.
    pub fn macro_design(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.clusters.len(), self.width, |g, k| self.clusters[g].covariates[k])
    }

    fn micro_response(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.total_rows(),
            self.clusters.iter().flat_map(|c| c.responses.iter().copied()),
        )
    }

    fn cluster_means(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.clusters.len(),
            self.clusters
                .iter()
                .map(|c| c.responses.iter().sum::<f64>() / c.responses.len() as f64),
        )
    }

    fn cluster_sizes(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.clusters.len(),
            self.clusters.iter().map(|c| c.responses.len() as f64),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub coefficients: Vec<f64>,
    /// One entry per fitted row (individual rows for micro fits, clusters for macro fits).
    pub fitted: Vec<f64>,
    /// Observed minus fitted, row-wise.
    pub residuals: Vec<f64>,
    /// Weighted residual sum of squares over `rows - (k + 1)`; `NaN` when there are no spare degrees of freedom.
    pub residual_variance: f64,
}

fn assemble(
    design: &DMatrix<f64>,
    response: &DVector<f64>,
    weights: &DVector<f64>,
) -> Result<LinearFit> {
    let sol = weighted_least_squares(design, response, weights)?;
    let fitted = design * &sol.coefficients;
    let residuals = response - &fitted;
    let rss: f64 = residuals
        .iter()
        .zip(weights.iter())
        .map(|(e, w)| w * e * e)
        .sum();
    let dof = design.nrows() as f64 - design.ncols() as f64;
    Ok(LinearFit {
        coefficients: sol.coefficients.iter().copied().collect(),
        fitted: fitted.iter().copied().collect(),
        residuals: residuals.iter().copied().collect(),
        residual_variance: if dof > 0.0 { rss / dof } else { f64::NAN },
    })
}

/// Ordinary least squares over all individual rows.
pub fn fit_ols_micro(data: &ClusteredLinearData) -> Result<LinearFit> {
    let x = data.micro_design();
    let w = DVector::from_element(x.nrows(), 1.0);
    assemble(&x, &data.micro_response(), &w)
}

/// Weighted least squares of the cluster means on the cluster covariates, weights `n_g`.
pub fn fit_wls_macro(data: &ClusteredLinearData) -> Result<LinearFit> {
    assemble(&data.macro_design(), &data.cluster_means(), &data.cluster_sizes())
}

/// `sum_{i,g} yhat_{i,g}` for a micro fit.
pub fn micro_prediction_total(fit: &LinearFit) -> f64 {
    fit.fitted.iter().sum()
}

/// `sum_g n_g x_g^T b` for a macro fit.
pub fn macro_prediction_total(data: &ClusteredLinearData, fit: &LinearFit) -> f64 {
    data.clusters
        .iter()
        .zip(&fit.fitted)
        .map(|(c, f)| c.responses.len() as f64 * f)
        .sum()
}

/// `s2 (X^T X)^{-1}` over the individual-row design.
pub fn micro_coefficient_covariance(data: &ClusteredLinearData, s2: f64) -> Result<DMatrix<f64>> {
    let x = data.micro_design();
    let w = DVector::from_element(x.nrows(), 1.0);
    let y = DVector::zeros(x.nrows());
    Ok(weighted_least_squares(&x, &y, &w)?.unscaled_covariance * s2)
}

/// `(Xbar^T diag(n_g / s2) Xbar)^{-1}` over the cluster design.
pub fn macro_coefficient_covariance(data: &ClusteredLinearData, s2: f64) -> Result<DMatrix<f64>> {
    let x = data.macro_design();
    let w = data.cluster_sizes() / s2;
    let y = DVector::zeros(x.nrows());
    Ok(weighted_least_squares(&x, &y, &w)?.unscaled_covariance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn toy() -> ClusteredLinearData {
        ClusteredLinearData::new(vec![
            LinearCluster {
                covariates: vec![1.0, 0.0],
                responses: vec![2.0, 4.0],
            },
            LinearCluster {
                covariates: vec![1.0, 1.0],
                responses: vec![6.0],
            },
        ])
        .unwrap()
    }

    #[test]
    fn hand_solved_normal_equations() {
        // X^T X = [[3,1],[1,1]], X^T y = [12,6]  =>  a = (3, 3)
        let micro = fit_ols_micro(&toy()).unwrap();
        assert_abs_diff_eq!(micro.coefficients[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(micro.coefficients[1], 3.0, epsilon = 1e-12);
        assert_eq!(micro.residuals.len(), 3);
        for ((r, f), y) in micro.residuals.iter().zip(&micro.fitted).zip([2.0, 4.0, 6.0]) {
            assert_abs_diff_eq!(*r, y - f, epsilon = 1e-12);
        }

        let macro_fit = fit_wls_macro(&toy()).unwrap();
        assert_abs_diff_eq!(macro_fit.coefficients[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(macro_fit.coefficients[1], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn intercept_only_constant_response() {
        let d = ClusteredLinearData::new(vec![LinearCluster {
            covariates: vec![1.0],
            responses: vec![5.0, 5.0],
        }])
        .unwrap();
        let fit = fit_ols_micro(&d).unwrap();
        assert_abs_diff_eq!(fit.coefficients[0], 5.0, epsilon = 1e-12);
        assert!(fit.residuals.iter().all(|r| r.abs() < 1e-12));
    }

    #[test]
    fn zero_response_gives_zero_coefficients() {
        let mut d = toy();
        for c in &mut d.clusters {
            c.responses.iter_mut().for_each(|y| *y = 0.0);
        }
        let fit = fit_ols_micro(&d).unwrap();
        assert!(fit.coefficients.iter().all(|b| b.abs() < 1e-12));
    }

    #[test]
    fn unit_cluster_sizes_reduce_to_plain_ols() {
        let d = ClusteredLinearData::new(vec![
            LinearCluster { covariates: vec![1.0, 0.0], responses: vec![1.0] },
            LinearCluster { covariates: vec![1.0, 1.0], responses: vec![2.5] },
            LinearCluster { covariates: vec![1.0, 2.0], responses: vec![2.9] },
        ])
        .unwrap();
        let a = fit_ols_micro(&d).unwrap();
        let b = fit_wls_macro(&d).unwrap();
        assert_eq!(a.fitted.len(), b.fitted.len());
        for (x, y) in a.coefficients.iter().zip(&b.coefficients) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn rank_deficient_design_rejected() {
        let d = ClusteredLinearData::new(vec![
            LinearCluster { covariates: vec![1.0, 2.0], responses: vec![1.0, 2.0] },
            LinearCluster { covariates: vec![2.0, 4.0], responses: vec![3.0] },
        ])
        .unwrap();
        assert!(matches!(fit_ols_micro(&d), Err(Error::Singular(_))));
        assert!(matches!(fit_wls_macro(&d), Err(Error::Singular(_))));
    }

    #[test]
    fn invalid_clusters_rejected() {
        assert!(ClusteredLinearData::new(vec![]).is_err());
        assert!(ClusteredLinearData::new(vec![LinearCluster {
            covariates: vec![1.0],
            responses: vec![],
        }])
        .is_err());
        assert!(ClusteredLinearData::new(vec![
            LinearCluster { covariates: vec![1.0], responses: vec![1.0] },
            LinearCluster { covariates: vec![1.0, 2.0], responses: vec![1.0] },
        ])
        .is_err());
    }
}
