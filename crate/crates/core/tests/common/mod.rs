#![allow(dead_code)]

use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use smart_analysis::contrasts::{ContrastResult, VarianceMethod, Z_95};
use smart_analysis::data::{load_dataset, replicate, write_dataset, LoadOptions, RandProbs, SmartDataset, TrialRecord};
use smart_analysis::estimator::{
    solve_estimating_equation, working_cov_matrix, CovarianceKind, FitOptions, MeanModelSpec, WorkingCovariance,
};
use smart_analysis::simulator::{run_study, SimConfig};
use smart_analysis::technique::{Technique, TechniqueOptions};
use smart_analysis::weights::{empirical_weights, known_weights, modeled_weights, WeightModel};

/// Shape of a randomly generated trial.
#[derive(Debug, Clone, Copy)]
pub struct Shape {
    pub n: usize,
    pub t_final: usize,
    pub baseline: bool,
    pub n_cov: usize,
    pub p1: f64,
    pub p2: f64,
}

impl Shape {
    pub fn cross_sectional(n: usize) -> Self {
        Shape {
            n,
            t_final: 1,
            baseline: false,
            n_cov: 0,
            p1: 0.5,
            p2: 0.5,
        }
    }

    pub fn longitudinal(n: usize, t_final: usize) -> Self {
        Shape {
            n,
            t_final,
            baseline: true,
            n_cov: 2,
            p1: 0.5,
            p2: 0.5,
        }
    }
}

/// A valid dataset with every design cell occupied. Outcome means differ by
/// cell, covariates and the auxiliary `l1` shift them, and occasions are
/// correlated through a person effect.
pub fn random_dataset(seed: u64, shape: Shape) -> SmartDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let response_rate = rng.random_range(0.25..0.65);
    let first = usize::from(!shape.baseline);
    let cell_shift: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut records = Vec::with_capacity(shape.n);
    for i in 0..shape.n {
        let (a1, responder, a2) = if i < 6 {
            let a1 = if i < 3 { 1 } else { -1 };
            match i % 3 {
                0 => (a1, true, None),
                1 => (a1, false, Some(1)),
                _ => (a1, false, Some(-1)),
            }
        } else {
            let a1 = if rng.random_bool(shape.p1) { 1 } else { -1 };
            let responder = rng.random_bool(response_rate);
            let a2 = (!responder).then(|| if rng.random_bool(shape.p2) { 1 } else { -1 });
            (a1, responder, a2)
        };
        let x: Vec<f64> = (0..shape.n_cov).map(|_| rng.sample(StandardNormal)).collect();
        let l = f64::from(u8::from(rng.random_bool(0.5)));
        let person: f64 = rng.sample::<f64, _>(StandardNormal) * 0.8;
        let cell = match (a1, a2) {
            (1, None) => 0,
            (1, Some(1)) => 1,
            (1, Some(_)) => 2,
            (_, None) => 3,
            (_, Some(1)) => 4,
            _ => 5,
        };
        let xs: f64 = x.iter().sum::<f64>() * 0.3;
        let y: Vec<f64> = (first..=shape.t_final)
            .map(|t| {
                let e: f64 = rng.sample(StandardNormal);
                0.5 + xs + person + e * 0.6 + t as f64 * (0.2 * f64::from(a1) + cell_shift[cell] + 0.2 * l)
            })
            .collect();
        records.push(
            TrialRecord::new(format!("p{i}"), a1, responder, a2, x, y)
                .expect("valid record")
                .with_aux(vec![l]),
        );
    }
    records.shuffle(&mut rng);
    SmartDataset::new(
        records,
        shape.t_final,
        first,
        1,
        (1..=shape.n_cov).map(|k| format!("x{k}")).collect(),
        vec!["l1".into()],
        RandProbs {
            p1: shape.p1,
            p2: shape.p2,
        },
    )
    .expect("valid dataset")
}

/// Which of the four interventions (1,1), (1,-1), (-1,1), (-1,-1) a record is consistent with.
pub fn consistent(rec: &TrialRecord) -> [bool; 4] {
    let first = if rec.a1 == 1 {
        [true, true, false, false]
    } else {
        [false, false, true, true]
    };
    match rec.a2 {
        None => first,
        Some(a2) => {
            let keep = if a2 == 1 {
                [true, false, true, false]
            } else {
                [false, true, false, true]
            };
            [
                first[0] && keep[0],
                first[1] && keep[1],
                first[2] && keep[2],
                first[3] && keep[3],
            ]
        }
    }
}

/// Inverse-probability-weighted cell means of the final outcome and their
/// influence-function covariance, computed from first principles.
pub struct Oracle {
    pub means: [f64; 4],
    pub cov: [[f64; 4]; 4],
}

pub fn oracle(ds: &SmartDataset) -> Oracle {
    let p = ds.rand_probs;
    let w: Vec<f64> = ds
        .records
        .iter()
        .map(|r| {
            let p_a1 = if r.a1 == 1 { p.p1 } else { 1.0 - p.p1 };
            let p_a2 = match r.a2 {
                None => 1.0,
                Some(1) => p.p2,
                Some(_) => 1.0 - p.p2,
            };
            1.0 / (p_a1 * p_a2)
        })
        .collect();
    let ind: Vec<[bool; 4]> = ds.records.iter().map(consistent).collect();
    let y: Vec<f64> = ds.records.iter().map(|r| *r.y.last().unwrap()).collect();
    let mut means = [0.0; 4];
    let mut total = [0.0; 4];
    for d in 0..4 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..y.len() {
            if ind[i][d] {
                num += w[i] * y[i];
                den += w[i];
            }
        }
        means[d] = num / den;
        total[d] = den;
    }
    let mut cov = [[0.0; 4]; 4];
    for i in 0..y.len() {
        let infl: Vec<f64> = (0..4)
            .map(|d| {
                if ind[i][d] {
                    w[i] * (y[i] - means[d]) / total[d]
                } else {
                    0.0
                }
            })
            .collect();
        for k in 0..4 {
            for l in 0..4 {
                cov[k][l] += infl[k] * infl[l];
            }
        }
    }
    Oracle { means, cov }
}

pub fn technique_options() -> TechniqueOptions {
    TechniqueOptions {
        k1: vec!["x1".into()],
        k2: vec!["x1".into(), "l1".into()],
        ..TechniqueOptions::default()
    }
}

pub fn dataset_strategy(shape: fn(usize) -> Shape, n: std::ops::Range<usize>) -> impl Strategy<Value = SmartDataset> {
    (any::<u64>(), n).prop_map(move |(seed, n)| random_dataset(seed, shape(n)))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

fn assert_all_close(a: &[f64], b: &[f64], tol: f64, what: &str) -> Result<(), TestCaseError> {
    prop_assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        prop_assert!(close(*x, *y, tol), "{}: {} vs {}", what, x, y);
    }
    Ok(())
}

/// Multiplying every weight by `c` leaves the coefficients and their covariance unchanged.
pub fn weight_scale_invariance(ds: &SmartDataset, c: f64, longitudinal: bool) -> Result<(), TestCaseError> {
    let (spec, opts) = if longitudinal {
        (
            MeanModelSpec::longitudinal(1),
            FitOptions::with_working(CovarianceKind::ExchHomogeneous),
        )
    } else {
        (MeanModelSpec::cross_sectional(), FitOptions::default())
    };
    let wf = known_weights(ds);
    let a = solve_estimating_equation(ds, &wf, &spec, &opts).map_err(fail)?;
    let b = solve_estimating_equation(ds, &wf.scaled(c), &spec, &opts).map_err(fail)?;
    assert_all_close(&a.gamma, &b.gamma, 1e-9, "gamma")?;
    assert_all_close(a.vcov_known.as_slice(), b.vcov_known.as_slice(), 1e-8, "vcov")?;
    Ok(())
}

/// Reordering the records leaves the fit unchanged.
pub fn permutation_invariance(ds: &SmartDataset, seed: u64) -> Result<(), TestCaseError> {
    let mut shuffled = ds.clone();
    shuffled.records.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let opts = technique_options();
    for t in [Technique::T0, Technique::T2e, Technique::T3, Technique::EnsembleM] {
        let a = smart_analysis::technique::fit_technique(ds, t, &opts).map_err(fail)?;
        let b = smart_analysis::technique::fit_technique(&shuffled, t, &opts).map_err(fail)?;
        assert_all_close(a.fit.theta().as_slice(), b.fit.theta().as_slice(), 1e-9, "theta")?;
        let va = a.fit.vcov_weight_adjusted.as_ref().unwrap_or(&a.fit.vcov_known);
        let vb = b.fit.vcov_weight_adjusted.as_ref().unwrap_or(&b.fit.vcov_known);
        assert_all_close(va.as_slice(), vb.as_slice(), 1e-8, "vcov")?;
    }
    Ok(())
}

/// Responders appear twice (once per second-stage option), non-responders once.
pub fn replicate_counts(ds: &SmartDataset) -> Result<(), TestCaseError> {
    let rows = replicate(ds);
    prop_assert_eq!(rows.len(), ds.n() + ds.n_responders());
    for (i, rec) in ds.records.iter().enumerate() {
        let mine: Vec<_> = rows.iter().filter(|r| r.source_index == i).collect();
        let expected = consistent(rec);
        prop_assert_eq!(mine.len(), expected.iter().filter(|&&b| b).count());
        for row in mine {
            prop_assert!(expected[row.ai.index()]);
            prop_assert_eq!(row.ai.a1(), rec.a1);
        }
    }
    Ok(())
}

/// The interval is centred on the estimate, has the Wald width, and excludes
/// zero exactly when the two-sided p-value is below 0.05.
pub fn ci_p_consistency(estimate: f64, se: f64) -> Result<(), TestCaseError> {
    let r = ContrastResult::wald("c".into(), estimate, se, VarianceMethod::Known);
    prop_assert!(close((r.ci[0] + r.ci[1]) / 2.0, estimate, 1e-12));
    prop_assert!(close(r.ci_length, 2.0 * Z_95 * se, 1e-12));
    prop_assert!((0.0..=1.0).contains(&r.p_value));
    let margin = (estimate.abs() / se - Z_95).abs();
    if margin > 1e-6 {
        let excludes_zero = r.ci[0] > 0.0 || r.ci[1] < 0.0;
        prop_assert_eq!(
            excludes_zero,
            r.p_value < 0.05,
            "estimate {} se {} p {}",
            estimate,
            se,
            r.p_value
        );
    }
    Ok(())
}

/// A single-occasion outcome makes the exchangeable fit coincide with the independence fit.
pub fn single_occasion_reduction(ds: &SmartDataset) -> Result<(), TestCaseError> {
    let last = ds.final_occasion_only();
    let wf = known_weights(&last);
    let spec = MeanModelSpec::cross_sectional();
    let ind = solve_estimating_equation(&last, &wf, &spec, &FitOptions::default()).map_err(fail)?;
    for kind in [CovarianceKind::ExchHomogeneous, CovarianceKind::ExchHeterogeneous] {
        let exch = solve_estimating_equation(&last, &wf, &spec, &FitOptions::with_working(kind)).map_err(fail)?;
        assert_all_close(&ind.gamma, &exch.gamma, 1e-10, "gamma")?;
        assert_all_close(ind.vcov_known.as_slice(), exch.vcov_known.as_slice(), 1e-9, "vcov")?;
    }
    Ok(())
}

/// Per-occasion scales that are all equal give the homogeneous matrix.
pub fn equal_sigma_reduction(sigma: f64, rho: f64, m: usize) -> Result<(), TestCaseError> {
    let het = working_cov_matrix(&WorkingCovariance::heterogeneous(vec![sigma; m], rho), m).map_err(fail)?;
    let hom = working_cov_matrix(&WorkingCovariance::homogeneous(sigma, rho), m).map_err(fail)?;
    assert_all_close(het.as_slice(), hom.as_slice(), 1e-14, "working covariance")
}

/// Modeled weights with no regressors coincide with the empirical weights,
/// including the estimated-weight variance.
pub fn intercept_only_matches_empirical(ds: &SmartDataset) -> Result<(), TestCaseError> {
    let emp = empirical_weights(ds).map_err(fail)?;
    let modeled = modeled_weights(ds, &WeightModel::modeled(vec![], vec![])).map_err(fail)?;
    assert_all_close(&emp.weights, &modeled.weights, 1e-12, "weights")?;
    let spec = MeanModelSpec::cross_sectional();
    let a = solve_estimating_equation(ds, &emp, &spec, &FitOptions::default()).map_err(fail)?;
    let b = solve_estimating_equation(ds, &modeled, &spec, &FitOptions::default()).map_err(fail)?;
    assert_all_close(&a.gamma, &b.gamma, 1e-12, "gamma")?;
    let (va, vb) = (a.vcov_weight_adjusted.unwrap(), b.vcov_weight_adjusted.unwrap());
    assert_all_close(va.as_slice(), vb.as_slice(), 1e-10, "weight-adjusted vcov")
}

/// Writing and re-reading a dataset reproduces it exactly.
pub fn csv_round_trip(ds: &SmartDataset) -> Result<(), TestCaseError> {
    let mut buf = Vec::new();
    write_dataset(ds, &mut buf).map_err(fail)?;
    let opts = LoadOptions {
        t_star: ds.t_star,
        rand_probs: ds.rand_probs,
        expected_t: Some(ds.t_final),
    };
    let back = load_dataset(buf.as_slice(), &opts).map_err(fail)?;
    prop_assert_eq!(&back, ds);
    Ok(())
}

/// The study result does not depend on the number of worker threads.
pub fn parallel_matches_sequential(seed: u64) -> Result<(), TestCaseError> {
    let cfg = SimConfig {
        n: 80,
        reps: 12,
        seed,
        techniques: vec![Technique::T0, Technique::T2e, Technique::T4],
        keep_reps: true,
        ..SimConfig::default()
    };
    let one = run_study(&cfg, Some(1)).map_err(fail)?;
    let many = run_study(&cfg, Some(4)).map_err(fail)?;
    prop_assert_eq!(one, many);
    Ok(())
}

pub fn fail(e: smart_analysis::Error) -> TestCaseError {
    TestCaseError::fail(e.to_string())
}
