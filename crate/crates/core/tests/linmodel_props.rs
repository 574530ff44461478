use proptest::prelude::*;
use reserve_lab::linmodel::*;
use reserve_lab::Error;

fn clustered() -> impl Strategy<Value = ClusteredLinearData> {
    (1usize..4, 0usize..8).prop_flat_map(|(k, extra)| {
        let m = k + 2 + extra;
        prop::collection::vec(
            (
                prop::collection::vec(-5.0f64..5.0, k),
                prop::collection::vec(-10.0f64..10.0, 1..7),
            ),
            m,
        )
        .prop_map(|clusters| {
            let clusters = clusters
                .into_iter()
                .map(|(x, y)| LinearCluster {
                    covariates: std::iter::once(1.0).chain(x).collect(),
                    responses: y,
                })
                .collect();
            ClusteredLinearData::new(clusters).unwrap()
        })
    })
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn micro_ols_equals_weighted_macro(data in clustered()) {
        let micro = fit_ols_micro(&data);
        prop_assume!(!matches!(micro, Err(Error::Singular(_))));
        let micro = micro.unwrap();
        let macro_fit = fit_wls_macro(&data).unwrap();
        prop_assert!(max_abs_diff(&micro.coefficients, &macro_fit.coefficients) <= 1e-10);

        let a = micro_prediction_total(&micro);
        let b = macro_prediction_total(&data, &macro_fit);
        prop_assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn micro_and_macro_covariances_coincide(data in clustered(), s2 in 0.1f64..10.0) {
        let micro = micro_coefficient_covariance(&data, s2);
        prop_assume!(micro.is_ok());
        let micro = micro.unwrap();
        let macro_cov = macro_coefficient_covariance(&data, s2).unwrap();
        let diff = (&micro - &macro_cov).abs().max();
        prop_assert!(diff <= 1e-10, "max entry difference {diff}");
    }
}
