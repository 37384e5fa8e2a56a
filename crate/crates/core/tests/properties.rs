mod common;

use common::*;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn coefficients_ignore_weight_scale(ds in dataset_strategy(Shape::cross_sectional, 20..150), c in 0.01f64..100.0) {
        weight_scale_invariance(&ds, c, false)?;
    }

    #[test]
    fn longitudinal_coefficients_ignore_weight_scale(
        ds in dataset_strategy(|n| Shape::longitudinal(n, 2), 40..150),
        c in 0.01f64..100.0,
    ) {
        weight_scale_invariance(&ds, c, true)?;
    }

    #[test]
    fn replicated_rows_per_record(ds in dataset_strategy(Shape::cross_sectional, 6..200)) {
        replicate_counts(&ds)?;
    }

    #[test]
    fn interval_agrees_with_p_value(estimate in -5.0f64..5.0, se in 0.01f64..3.0) {
        ci_p_consistency(estimate, se)?;
    }

    #[test]
    fn single_occasion_exchangeable_is_independence(ds in dataset_strategy(|n| Shape::longitudinal(n, 2), 20..150)) {
        single_occasion_reduction(&ds)?;
    }

    #[test]
    fn equal_scales_give_homogeneous_matrix(sigma in 0.05f64..10.0, rho in -0.3f64..0.99, m in 1usize..6) {
        let lo = -1.0 / (m.max(2) as f64 - 1.0);
        prop_assume!(rho > lo + 1e-3);
        equal_sigma_reduction(sigma, rho, m)?;
    }

    #[test]
    fn intercept_only_modeled_weights_are_empirical(ds in dataset_strategy(Shape::cross_sectional, 30..200)) {
        intercept_only_matches_empirical(&ds)?;
    }

    #[test]
    fn dataset_csv_round_trip(ds in dataset_strategy(|n| Shape::longitudinal(n, 3), 6..80)) {
        csv_round_trip(&ds)?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn fits_ignore_record_order(ds in dataset_strategy(|n| Shape::longitudinal(n, 2), 150..250), seed in any::<u64>()) {
        permutation_invariance(&ds, seed)?;
    }

    #[test]
    fn study_ignores_worker_count(seed in any::<u64>()) {
        parallel_matches_sequential(seed)?;
    }
}
