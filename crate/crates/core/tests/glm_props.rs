use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use reserve_lab::glm::{self, Family, GlmFit, GlmSpec};
use reserve_lab::microsim::{self, MicroDataset, Payment, SimConfig, Variant};
use reserve_lab::reserve;
use reserve_lab::triangle::{load_triangle_file, Triangle, TriangleKind};

/// Cluster covariate rows (with intercept), cluster totals and payment counts.
#[derive(Debug, Clone)]
struct Clusters {
    covariates: Vec<Vec<f64>>,
    totals: Vec<f64>,
    counts: Vec<usize>,
    seed: u64,
}

fn clusters() -> impl Strategy<Value = Clusters> {
    (1usize..4, 0usize..10).prop_flat_map(|(k, extra)| {
        let m = k + 2 + extra;
        (
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, k), m),
            prop::collection::vec(1.0f64..1e5, m),
            prop::collection::vec(1usize..9, m),
            any::<u64>(),
        )
            .prop_map(|(x, totals, counts, seed)| Clusters {
                covariates: x.into_iter().map(|r| std::iter::once(1.0).chain(r).collect()).collect(),
                totals,
                counts,
                seed,
            })
    })
}

impl Clusters {
    fn macro_spec(&self, family: Family) -> GlmSpec {
        let m = self.totals.len();
        let p = self.covariates[0].len();
        GlmSpec::new(
            DMatrix::from_fn(m, p, |g, k| self.covariates[g][k]),
            DVector::from_vec(self.totals.clone()),
            DVector::zeros(m),
            family,
        )
        .unwrap()
    }

    /// Rows split with continuous Dirichlet(1) shares, offset `log(1 / n_g)`.
    fn micro_spec(&self, family: Family) -> GlmSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let p = self.covariates[0].len();
        let (mut x, mut y, mut o) = (Vec::new(), Vec::new(), Vec::new());
        for g in 0..self.totals.len() {
            let n = self.counts[g];
            let e: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
            let s: f64 = e.iter().sum();
            for share in e {
                x.extend_from_slice(&self.covariates[g]);
                y.push(self.totals[g] * share / s);
                o.push(-(n as f64).ln());
            }
        }
        let rows = y.len();
        GlmSpec::new(
            DMatrix::from_row_slice(rows, p, &x),
            DVector::from_vec(y),
            DVector::from_vec(o),
            family,
        )
        .unwrap()
    }
}

fn fits(c: &Clusters, family: Family) -> Option<(GlmFit, GlmFit)> {
    let macro_fit = glm::fit(&c.macro_spec(family)).ok()?;
    let micro_fit = glm::fit(&c.micro_spec(family)).ok()?;
    Some((micro_fit, macro_fit))
}

fn uk() -> Triangle {
    load_triangle_file(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/uk_motor.csv"), 1000.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(150))]

    #[test]
    fn micro_poisson_matches_macro_coefficients_and_totals(c in clusters()) {
        let fitted = fits(&c, Family::Poisson);
        prop_assume!(fitted.is_some());
        let (micro, macro_fit) = fitted.unwrap();
        let diff = (&micro.coefficients - &macro_fit.coefficients).abs().max();
        prop_assert!(diff <= 1e-8, "coefficient gap {diff}");
        let a = micro.fitted.sum();
        let b = macro_fit.fitted.sum();
        prop_assert!((a - b).abs() <= 1e-8 * b, "{a} vs {b}");
    }

    #[test]
    fn micro_poisson_covariance_matches_macro(c in clusters()) {
        let fitted = fits(&c, Family::Poisson);
        prop_assume!(fitted.is_some());
        let (micro, macro_fit) = fitted.unwrap();
        let a = glm::coefficient_covariance(&micro).unwrap();
        let b = glm::coefficient_covariance(&macro_fit).unwrap();
        let scale = b.abs().max();
        prop_assert!((&a - &b).abs().max() <= 1e-7 * scale);
    }

    #[test]
    fn psi_verdict_is_dispersion_ordering(c in clusters()) {
        let fitted = fits(&c, Family::QuasiPoisson);
        prop_assume!(fitted.is_some());
        let (micro, macro_fit) = fitted.unwrap();
        prop_assume!(micro.pearson_dispersion.is_some() && macro_fit.pearson_dispersion.is_some());
        let psi = glm::psi_comparison(&micro, &macro_fit).unwrap();
        let phi_micro = micro.pearson_dispersion.unwrap();
        let phi_macro = macro_fit.pearson_dispersion.unwrap();
        prop_assume!((phi_micro - phi_macro).abs() > 1e-9 * phi_macro);
        prop_assert_eq!(psi.micro_more_precise, phi_micro <= phi_macro);
    }

    #[test]
    fn irls_deviance_never_increases(c in clusters()) {
        let spec = c.micro_spec(Family::Poisson);
        let fit = glm::fit(&spec);
        prop_assume!(fit.is_ok());
        let fit = fit.unwrap();
        for w in fit.deviance_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0), "{:?}", fit.deviance_trace);
        }
        let score = spec.score(&fit.coefficients).norm();
        let scale = (spec.design().transpose() * spec.response()).norm();
        prop_assert!(score <= 1e-6 * scale, "score {score} vs {scale}");
    }
}

/// Exact-total splits of random positive triangles reproduce the macro fit.
#[test]
fn triangle_disaggregations_preserve_fit() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..100 {
        let size = 2 + case % 5;
        let rows: Vec<Vec<f64>> = (0..size)
            .map(|i| (0..size - i).map(|_| rng.random_range(100.0..1e6f64).floor()).collect())
            .collect();
        let t = Triangle::new(TriangleKind::Incremental, rows).unwrap();
        let mut payments = Vec::new();
        for (cell, y) in t.observed() {
            let n = rng.random_range(1..10);
            for amount in microsim::split_cluster_exact(y, n, &mut rng) {
                payments.push(Payment { cell, claim: None, amount, covariate: None });
            }
        }
        let d = MicroDataset::from_payments(size, payments).unwrap();
        let micro = glm::fit(&d.glm_spec(Family::Poisson).unwrap()).unwrap();
        let macro_fit = reserve::fit_macro(&t, Family::Poisson).unwrap();
        let gap = (&micro.coefficients - &macro_fit.coefficients).abs().max();
        assert!(gap <= 1e-8, "case {case}: {gap}");
        let (a, b) = (micro.fitted.sum(), macro_fit.fitted.sum());
        assert!((a - b).abs() <= 1e-8 * b);
    }
}

/// Splitting the real triangle at random changes the quasi-Poisson dispersion.
#[test]
fn random_splits_change_the_dispersion() {
    let t = uk();
    let macro_fit = reserve::fit_macro(&t, Family::QuasiPoisson).unwrap();
    let phi_macro = macro_fit.pearson_dispersion.unwrap();
    let cfg = SimConfig::new(Variant::D, 10.0, 1, 5);
    for r in 0..100 {
        let d = microsim::replicate_dataset(&t, &cfg, r).unwrap();
        let micro = glm::fit(&d.glm_spec(Family::QuasiPoisson).unwrap()).unwrap();
        let phi_micro = micro.pearson_dispersion.unwrap();
        assert!((phi_micro - phi_macro).abs() > 1e-6 * phi_macro, "replicate {r}");
    }
}
