mod common;

use common::*;
use smart_analysis::contrasts::{
    estimate_contrast, nonresponder_second_stage, pairwise_table, ContrastSpec, VarianceMethod, AI_NAMES,
    PAIRWISE_ORDER,
};
use smart_analysis::data::AiLabel;
use smart_analysis::estimator::{estimating_equation, ipw_cell_means, CovarianceKind, FitOptions, MeanModelSpec};
use smart_analysis::technique::{fit_technique, Technique, TechniqueOptions};
use smart_analysis::weights::known_weights;

fn contrast_variance(cov: &[[f64; 4]; 4], k: usize, l: usize) -> f64 {
    cov[k][k] + cov[l][l] - 2.0 * cov[k][l]
}

#[test]
fn saturated_fit_reproduces_weighted_cell_means() {
    for seed in 0..25 {
        let ds = random_dataset(seed, Shape::cross_sectional(20 + 7 * seed as usize));
        let truth = oracle(&ds);
        let tf = fit_technique(&ds, Technique::T0, &TechniqueOptions::default()).unwrap();
        for (d, ai) in AiLabel::ALL.iter().enumerate() {
            assert!(
                (tf.fit.ai_mean(*ai) - truth.means[d]).abs() < 1e-10,
                "seed {seed}, d {d}"
            );
        }
        let rows = pairwise_table(&tf.fit, VarianceMethod::Known).unwrap();
        for (row, &(k, l)) in rows.iter().zip(PAIRWISE_ORDER.iter()) {
            assert_eq!(row.pair, format!("{} vs {}", AI_NAMES[k], AI_NAMES[l]));
            assert!((row.result.estimate - (truth.means[k] - truth.means[l])).abs() < 1e-10);
            let var = contrast_variance(&truth.cov, k, l);
            assert!(
                (row.result.se.powi(2) - var).abs() < 1e-8,
                "seed {seed}: {} vs {var}",
                row.result.se.powi(2)
            );
        }
    }
}

#[test]
fn cell_mean_summary_matches_oracle() {
    for seed in 100..110 {
        let ds = random_dataset(
            seed,
            Shape {
                p1: 0.4,
                p2: 0.7,
                ..Shape::cross_sectional(90)
            },
        );
        let truth = oracle(&ds);
        let cm = ipw_cell_means(&ds, &known_weights(&ds)).unwrap();
        for k in 0..4 {
            assert!((cm.mu_hat[k] - truth.means[k]).abs() < 1e-12);
            for l in 0..4 {
                assert!((cm.cov[k][l] - truth.cov[k][l]).abs() < 1e-12);
            }
        }
        assert!(cm.disjoint[0][2] && cm.disjoint[1][3] && !cm.disjoint[0][1]);
    }
}

#[test]
fn unequal_design_probabilities_are_respected() {
    let ds = random_dataset(
        7,
        Shape {
            p1: 0.3,
            p2: 0.8,
            ..Shape::cross_sectional(160)
        },
    );
    let truth = oracle(&ds);
    let tf = fit_technique(&ds, Technique::T0, &TechniqueOptions::default()).unwrap();
    let r = estimate_contrast(&tf.fit, &ContrastSpec::default_target(), VarianceMethod::Known).unwrap();
    assert!((r.estimate - (truth.means[0] - truth.means[3])).abs() < 1e-10);
}

#[test]
fn every_technique_solves_its_estimating_equation() {
    let opts = technique_options();
    for seed in 0..8 {
        let ds = random_dataset(
            seed,
            Shape::longitudinal(150 + 10 * seed as usize, 2 + seed as usize % 2),
        );
        for t in Technique::ALL {
            let tf = fit_technique(&ds, t, &opts).unwrap_or_else(|e| panic!("{t}: {e}"));
            assert!(tf.fit.converged, "{t} did not converge");
            let ee = estimating_equation(&tf.fit, &ds, &tf.weights).unwrap();
            let worst = ee.amax();
            assert!(worst < 1e-8, "{t}, seed {seed}: residual {worst:e}");
        }
    }
}

#[test]
fn weight_adjusted_variance_never_exceeds_known_formula() {
    let opts = technique_options();
    for seed in 0..10 {
        let ds = random_dataset(seed, Shape::longitudinal(200, 2));
        for t in [
            Technique::T2e,
            Technique::T2m,
            Technique::EnsembleE,
            Technique::EnsembleM,
        ] {
            let tf = fit_technique(&ds, t, &opts).unwrap();
            let spec = ContrastSpec::default_target();
            let adj = estimate_contrast(&tf.fit, &spec, VarianceMethod::WeightAdjusted).unwrap();
            let known = estimate_contrast(&tf.fit, &spec, VarianceMethod::Known).unwrap();
            assert!(
                adj.se.powi(2) <= known.se.powi(2) + 1e-12,
                "{t}: {} > {}",
                adj.se,
                known.se
            );
        }
    }
}

#[test]
fn known_weight_fits_have_no_weight_adjusted_variance() {
    let ds = random_dataset(3, Shape::cross_sectional(80));
    let tf = fit_technique(&ds, Technique::T0, &TechniqueOptions::default()).unwrap();
    assert!(estimate_contrast(&tf.fit, &ContrastSpec::default_target(), VarianceMethod::WeightAdjusted).is_err());
}

#[test]
fn nonresponder_contrast_is_a_difference_in_means() {
    let ds = random_dataset(11, Shape::cross_sectional(180));
    let group = |a2: i8| -> Vec<f64> {
        ds.records
            .iter()
            .filter(|r| r.a2 == Some(a2))
            .map(|r| r.final_outcome())
            .collect()
    };
    let (g1, g0) = (group(1), group(-1));
    let mean = |g: &[f64]| g.iter().sum::<f64>() / g.len() as f64;
    let var = |g: &[f64]| {
        let m = mean(g);
        g.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (g.len() as f64).powi(2)
    };
    let r = nonresponder_second_stage(&ds, &[]).unwrap();
    assert!((r.estimate - (mean(&g1) - mean(&g0))).abs() < 1e-10);
    assert!((r.se.powi(2) - (var(&g1) + var(&g0))).abs() < 1e-10);
}

#[test]
fn longitudinal_working_correlation_is_estimated() {
    let ds = random_dataset(5, Shape::longitudinal(400, 3));
    let wf = known_weights(&ds);
    let fit = smart_analysis::estimator::solve_estimating_equation(
        &ds,
        &wf,
        &MeanModelSpec::longitudinal(1),
        &FitOptions::with_working(CovarianceKind::ExchHomogeneous),
    )
    .unwrap();
    assert!(
        fit.working.rho > 0.2 && fit.working.rho < 0.9,
        "rho {}",
        fit.working.rho
    );
    assert!(fit.iterations > 1);
}
