use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reserve_lab::glm::{self, Family};
use reserve_lab::microsim::{self, SimConfig, Variant};
use reserve_lab::reserve;
use reserve_lab::triangle::{load_triangle_file, Triangle};

const RESERVE: f64 = 28_655_773.0;

fn uk() -> Triangle {
    load_triangle_file(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/uk_motor.csv"), 1000.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn split_parts_are_floored_shares(amount in 0.0f64..1e8, n in 1usize..50, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parts = microsim::split_cluster(amount.floor(), n, &mut rng);
        let sum: f64 = parts.iter().sum();
        prop_assert_eq!(parts.len(), n);
        prop_assert!(sum <= amount.floor() && sum > amount.floor() - n as f64);
    }

    #[test]
    fn exact_split_sums_to_amount(amount in 0u64..100_000_000, n in 1usize..50, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parts = microsim::split_cluster_exact(amount as f64, n, &mut rng);
        prop_assert_eq!(parts.iter().sum::<f64>(), amount as f64);
    }
}

#[test]
fn quasi_poisson_replicates_keep_the_reserve() {
    let t = uk();
    let s = microsim::run_experiment(&t, &SimConfig::new(Variant::D, 50.0, 40, 8)).unwrap();
    assert!(s.failures.is_empty());
    for r in &s.records {
        assert!((r.best_estimate - RESERVE).abs() <= 1e-3 * RESERVE, "{}", r.best_estimate);
        assert!(r.drift >= 0.0);
    }
}

#[test]
fn micro_dispersion_falls_with_granularity() {
    let t = uk();
    let coarse = microsim::run_experiment(&t, &SimConfig::new(Variant::D, 10.0, 200, 1)).unwrap();
    let fine = microsim::run_experiment(&t, &SimConfig::new(Variant::D, 250.0, 200, 1)).unwrap();
    assert!(fine.mean_pearson_dispersion < coarse.mean_pearson_dispersion);
}

#[test]
fn psi_verdict_matches_msep_ordering_per_replicate() {
    let t = uk();
    let (macro_fit, macro_est) = reserve::macro_reserve(&t, Family::QuasiPoisson).unwrap();
    let cfg = SimConfig::new(Variant::D, 125.0, 60, 3);
    for r in 0..cfg.replicates {
        let d = microsim::replicate_dataset(&t, &cfg, r).unwrap();
        let micro = glm::fit(&d.glm_spec(Family::QuasiPoisson).unwrap()).unwrap();
        let phi = micro.covariance_dispersion().unwrap();
        let micro_est = reserve::msep_unconditional(&micro, &t.index_sets(), phi).unwrap();
        let psi = glm::psi_comparison(&micro, &macro_fit).unwrap();
        let cmp = reserve::compare_micro_macro(&macro_est, &micro_est, Some(&psi)).unwrap();
        assert_eq!(cmp.psi_consistent, Some(true), "replicate {r}: {cmp:?}");
    }
}

#[test]
fn experiments_are_deterministic_across_thread_counts() {
    let t = uk();
    let cfg = SimConfig::new(Variant::F, 25.0, 12, 77);
    let a = microsim::run_experiment(&t, &cfg).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = pool.install(|| microsim::run_experiment(&t, &cfg).unwrap());
    assert_eq!(a, b);
}

#[test]
fn strong_covariate_lowers_msep() {
    let t = uk();
    let e = microsim::run_experiment(&t, &SimConfig::new(Variant::E, 50.0, 40, 4)).unwrap();
    let f = microsim::run_experiment(&t, &SimConfig::new(Variant::F, 50.0, 40, 4)).unwrap();
    assert!(f.sqrt_mean_msep < e.sqrt_mean_msep);
    assert!((e.mean_best_estimate - RESERVE).abs() <= 1e-3 * RESERVE);
}
