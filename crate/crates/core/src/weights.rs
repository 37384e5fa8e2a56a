//! Inverse-probability-of-assignment weights.
//!
//! Known weights use the design probabilities. Empirical and modeled weights
//! replace them with maximum-likelihood fits of logistic assignment models;
//! the per-record scores of those fits feed the estimated-weight variance in
//! [`crate::estimator::weight_adjusted_vcov`].
//!
//! The stage-2 model is fitted among non-responders only and always contains
//! an intercept and `a1`, so the intercept-only model reproduces the
//! per-stratum sample proportions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::SmartDataset;
use crate::error::{Error, Result};
use crate::linalg::{max_abs, spd_solve};

/// Weights above this value are flagged, never truncated.
pub const EXTREME_WEIGHT: f64 = 1e6;

/// Fitted probabilities closer than this to 0 or 1 are treated as separation.
const SEPARATION_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightKind {
    Known,
    Empirical,
    Modeled,
}

/// Which weights to use and, for modeled weights, the assignment-model regressors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightModel {
    pub kind: WeightKind,
    /// Baseline covariates for `P(A1 = 1 | K1)`.
    #[serde(default)]
    pub k1: Vec<String>,
    /// Covariates, `a1` and auxiliary variables for `P(A2 = 1 | K2)`.
    #[serde(default)]
    pub k2: Vec<String>,
}

impl WeightModel {
    pub fn known() -> Self {
        WeightModel {
            kind: WeightKind::Known,
            k1: Vec::new(),
            k2: Vec::new(),
        }
    }

    pub fn empirical() -> Self {
        WeightModel {
            kind: WeightKind::Empirical,
            ..WeightModel::known()
        }
    }

    pub fn modeled(k1: Vec<String>, k2: Vec<String>) -> Self {
        WeightModel {
            kind: WeightKind::Modeled,
            k1,
            k2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogisticFit {
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub max_abs_gradient: f64,
}

impl LogisticFit {
    pub fn predict(&self, row: &[f64]) -> f64 {
        expit(row.iter().zip(&self.coefficients).map(|(x, b)| x * b).sum())
    }
}

/// A fitted assignment model together with the names of its regressors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssignmentModel {
    pub regressors: Vec<String>,
    pub fit: LogisticFit,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightFit {
    pub kind: WeightKind,
    /// One weight per record, shared by every replicated row of that record.
    pub weights: Vec<f64>,
    /// Stacked stage-1 and stage-2 coefficients; empty for known weights.
    pub omega_hat: Vec<f64>,
    /// Per-record score vectors at `omega_hat`; zero-length for known weights.
    pub scores: Vec<Vec<f64>>,
    pub stage1: Option<AssignmentModel>,
    pub stage2: Option<AssignmentModel>,
    pub extreme_weight_warning: bool,
}

impl WeightFit {
    pub fn is_estimated(&self) -> bool {
        self.scores.first().is_some_and(|s| !s.is_empty())
    }

    pub fn score_dim(&self) -> usize {
        self.scores.first().map_or(0, |s| s.len())
    }

    /// Sum of score vectors over records.
    pub fn score_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.score_dim()];
        for s in &self.scores {
            for (acc, v) in sums.iter_mut().zip(s) {
                *acc += v;
            }
        }
        sums
    }

    /// Same fit with every weight multiplied by `c`.
    pub fn scaled(&self, c: f64) -> WeightFit {
        let mut out = self.clone();
        out.weights.iter_mut().for_each(|w| *w *= c);
        out
    }
}

pub fn expit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Probability of the arm actually received under `P(arm = 1) = p`.
fn received(p: f64, arm: i8) -> f64 {
    if arm == 1 {
        p
    } else {
        1.0 - p
    }
}

/// Weights from the design randomization probabilities: `1 / P(A1)` for
/// responders and `1 / (P(A1) P(A2))` for non-responders.
pub fn known_weights(ds: &SmartDataset) -> WeightFit {
    let probs = ds.rand_probs;
    let weights: Vec<f64> = ds
        .records
        .iter()
        .map(|rec| {
            let stage1 = received(probs.p1, rec.a1);
            match rec.a2 {
                Some(a2) if !rec.responder => 1.0 / (stage1 * received(probs.p2, a2)),
                _ => 1.0 / stage1,
            }
        })
        .collect();
    let extreme_weight_warning = weights.iter().any(|&w| w > EXTREME_WEIGHT);
    WeightFit {
        kind: WeightKind::Known,
        weights,
        omega_hat: Vec::new(),
        scores: vec![Vec::new(); ds.n()],
        stage1: None,
        stage2: None,
        extreme_weight_warning,
    }
}

/// Weights from the sample assignment proportions (stage 2 within each `a1` stratum).
pub fn empirical_weights(ds: &SmartDataset) -> Result<WeightFit> {
    let n1 = ds.records.iter().filter(|r| r.a1 == 1).count();
    if n1 == 0 || n1 == ds.n() {
        return Err(Error::Positivity("empirical positivity violated at stage 1".into()));
    }
    for a1 in [1, -1] {
        let stratum: Vec<_> = ds.records.iter().filter(|r| !r.responder && r.a1 == a1).collect();
        let treated = stratum.iter().filter(|r| r.a2 == Some(1)).count();
        if treated == 0 || treated == stratum.len() {
            return Err(Error::Positivity(format!(
                "empirical positivity violated at stage 2 (a1 = {a1})"
            )));
        }
    }
    let mut fit = fit_weights(ds, &[], &[])?;
    fit.kind = WeightKind::Empirical;
    Ok(fit)
}

/// Weights from logistic assignment models on `K1` and `K2`.
pub fn modeled_weights(ds: &SmartDataset, model: &WeightModel) -> Result<WeightFit> {
    match model.kind {
        WeightKind::Known => Ok(known_weights(ds)),
        WeightKind::Empirical => empirical_weights(ds),
        WeightKind::Modeled => fit_weights(ds, &model.k1, &model.k2),
    }
}

enum Regressor {
    Covariate(usize),
    Aux(usize),
    A1,
}

fn resolve(ds: &SmartDataset, name: &str, allow_post_baseline: bool) -> Result<Regressor> {
    if name == "a1" {
        return if allow_post_baseline {
            Ok(Regressor::A1)
        } else {
            Err(Error::InvalidModel("k1 may not contain a1".into()))
        };
    }
    let bare_x = name.strip_prefix("x_").unwrap_or(name);
    if let Some(k) = ds.covariate_index(bare_x) {
        return Ok(Regressor::Covariate(k));
    }
    let bare_l = name.strip_prefix("l_").unwrap_or(name);
    if let Some(k) = ds.aux_index(bare_l) {
        return if allow_post_baseline {
            Ok(Regressor::Aux(k))
        } else {
            Err(Error::InvalidModel(format!(
                "k1 may only contain baseline covariates; `{name}` is post-baseline"
            )))
        };
    }
    Err(Error::InvalidModel(format!("unknown weight-model variable `{name}`")))
}

fn fit_weights(ds: &SmartDataset, k1: &[String], k2: &[String]) -> Result<WeightFit> {
    let n = ds.n();
    let k1_vars = k1
        .iter()
        .map(|name| resolve(ds, name, false))
        .collect::<Result<Vec<_>>>()?;
    let mut k2_names = vec!["a1".to_string()];
    let mut k2_vars = vec![Regressor::A1];
    for name in k2.iter().filter(|n| n.as_str() != "a1") {
        k2_vars.push(resolve(ds, name, true)?);
        k2_names.push(name.clone());
    }

    let row = |vars: &[Regressor], rec: &crate::data::TrialRecord| -> Vec<f64> {
        std::iter::once(1.0)
            .chain(vars.iter().map(|v| match v {
                Regressor::Covariate(k) => rec.x[*k],
                Regressor::Aux(k) => rec.aux[*k],
                Regressor::A1 => f64::from(rec.a1),
            }))
            .collect()
    };

    let k1_rows: Vec<Vec<f64>> = ds.records.iter().map(|r| row(&k1_vars, r)).collect();
    let q1 = k1_vars.len() + 1;
    let design1 = DMatrix::from_fn(n, q1, |i, j| k1_rows[i][j]);
    let a1: Vec<bool> = ds.records.iter().map(|r| r.a1 == 1).collect();
    let fit1 = fit_logistic(&design1, &a1, 1e-8, 50)?;

    let nonresp: Vec<usize> = (0..n).filter(|&i| !ds.records[i].responder).collect();
    if nonresp.is_empty() {
        return Err(Error::Positivity(
            "no non-responders to fit the stage-2 assignment model".into(),
        ));
    }
    let k2_rows: Vec<Vec<f64>> = ds.records.iter().map(|r| row(&k2_vars, r)).collect();
    let q2 = k2_vars.len() + 1;
    let design2 = DMatrix::from_fn(nonresp.len(), q2, |i, j| k2_rows[nonresp[i]][j]);
    let a2: Vec<bool> = nonresp.iter().map(|&i| ds.records[i].a2 == Some(1)).collect();
    let fit2 = fit_logistic(&design2, &a2, 1e-8, 50)?;

    let mut weights = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for (i, rec) in ds.records.iter().enumerate() {
        let p1 = fit1.predict(&k1_rows[i]);
        let resid1 = if rec.a1 == 1 { 1.0 - p1 } else { -p1 };
        let mut score: Vec<f64> = k1_rows[i].iter().map(|k| resid1 * k).collect();
        let mut w = 1.0 / received(p1, rec.a1);
        match rec.a2 {
            Some(a2) if !rec.responder => {
                let p2 = fit2.predict(&k2_rows[i]);
                w /= received(p2, a2);
                let resid2 = if a2 == 1 { 1.0 - p2 } else { -p2 };
                score.extend(k2_rows[i].iter().map(|k| resid2 * k));
            }
            _ => score.extend(std::iter::repeat_n(0.0, q2)),
        }
        weights.push(w);
        scores.push(score);
    }

    let extreme_weight_warning = weights.iter().any(|&w| w > EXTREME_WEIGHT);
    let mut k1_names = vec!["(intercept)".to_string()];
    k1_names.extend(k1.iter().cloned());
    k2_names.insert(0, "(intercept)".to_string());
    Ok(WeightFit {
        kind: WeightKind::Modeled,
        weights,
        omega_hat: fit1.coefficients.iter().chain(&fit2.coefficients).copied().collect(),
        scores,
        stage1: Some(AssignmentModel {
            regressors: k1_names,
            fit: fit1,
        }),
        stage2: Some(AssignmentModel {
            regressors: k2_names,
            fit: fit2,
        }),
        extreme_weight_warning,
    })
}

/// Newton–Raphson maximum likelihood for a logistic regression.
///
/// Converges when the largest absolute score component is below `tol`.
pub fn fit_logistic(design: &DMatrix<f64>, response: &[bool], tol: f64, max_iter: usize) -> Result<LogisticFit> {
    let (n, p) = design.shape();
    if response.len() != n {
        return Err(Error::InvalidModel("response length does not match design rows".into()));
    }
    if n < p || p == 0 {
        return Err(Error::RankDeficient(format!("{n} rows for {p} regressors")));
    }
    let gram = design.transpose() * design;
    let eig = gram.symmetric_eigenvalues();
    let (lo, hi) = eig
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if lo <= hi * 1e-12 {
        return Err(Error::RankDeficient(
            "assignment-model design does not have full column rank".into(),
        ));
    }
    if response.iter().all(|&r| r) || response.iter().all(|&r| !r) {
        return Err(Error::Separation("all responses are equal".into()));
    }

    let y = DVector::from_iterator(n, response.iter().map(|&r| f64::from(u8::from(r))));
    let loglik = |beta: &DVector<f64>| -> f64 {
        let eta = design * beta;
        eta.iter().zip(y.iter()).map(|(&e, &yi)| yi * e - softplus(e)).sum()
    };

    let mut beta = DVector::zeros(p);
    let mut ll = loglik(&beta);
    for iter in 0..=max_iter {
        let eta = design * &beta;
        let probs = eta.map(expit);
        if probs
            .iter()
            .any(|&q| !(SEPARATION_EPS..=1.0 - SEPARATION_EPS).contains(&q))
        {
            return Err(Error::Separation(
                "fitted assignment probability is numerically 0 or 1".into(),
            ));
        }
        let grad = design.transpose() * (&y - &probs);
        let gmax = max_abs(&grad);
        if gmax < tol {
            return Ok(LogisticFit {
                coefficients: beta.iter().copied().collect(),
                converged: true,
                iterations: iter,
                max_abs_gradient: gmax,
            });
        }
        if iter == max_iter {
            break;
        }
        let wx = DMatrix::from_fn(n, p, |i, j| probs[i] * (1.0 - probs[i]) * design[(i, j)]);
        let hessian = design.transpose() * wx;
        let step = spd_solve(&hessian, &grad, "logistic information matrix")
            .map_err(|_| Error::Separation("information matrix became singular".into()))?;
        let mut scale = 1.0;
        loop {
            let candidate = &beta + &step * scale;
            let cand_ll = loglik(&candidate);
            if cand_ll >= ll - 1e-12 * ll.abs() || scale < 1e-6 {
                beta = candidate;
                ll = cand_ll;
                break;
            }
            scale *= 0.5;
        }
    }
    Err(Error::NonConvergence {
        what: "logistic assignment model".into(),
        iterations: max_iter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{RandProbs, TrialRecord};

    fn record(id: usize, a1: i8, a2: Option<i8>, x: f64) -> TrialRecord {
        TrialRecord::new(format!("u{id}"), a1, a2.is_none(), a2, vec![x], vec![0.0]).unwrap()
    }

    fn dataset(records: Vec<TrialRecord>, probs: RandProbs) -> SmartDataset {
        SmartDataset::new(records, 1, 1, 0, vec!["x".into()], vec![], probs).unwrap()
    }

    /// Eight units: two per stage-1 arm respond, the rest split evenly at stage 2.
    fn balanced() -> SmartDataset {
        let mut recs = Vec::new();
        let mut id = 0;
        for a1 in [1, -1] {
            for a2 in [None, None, Some(1), Some(-1)] {
                recs.push(record(id, a1, a2, id as f64 * 0.1));
                id += 1;
            }
        }
        dataset(recs, RandProbs::default())
    }

    #[test]
    fn known_weights_at_half() {
        let ds = balanced();
        let wf = known_weights(&ds);
        for (rec, w) in ds.records.iter().zip(&wf.weights) {
            assert_eq!(*w, if rec.responder { 2.0 } else { 4.0 });
        }
        assert!(!wf.is_estimated());
    }

    #[test]
    fn known_weights_unequal_probabilities() {
        let ds = dataset(
            vec![record(0, 1, Some(1), 0.0), record(1, -1, None, 0.0)],
            RandProbs { p1: 0.4, p2: 0.5 },
        );
        let wf = known_weights(&ds);
        assert!((wf.weights[0] - 5.0).abs() < 1e-12);
        assert!((wf.weights[1] - 1.0 / 0.6).abs() < 1e-12);
    }

    #[test]
    fn empirical_stage1_factor() {
        // 10 units, 6 with A1 = 1. Non-responders balanced within each arm.
        let mut recs = Vec::new();
        let plan: [(i8, Option<i8>); 10] = [
            (1, None),
            (1, None),
            (1, Some(1)),
            (1, Some(-1)),
            (1, Some(1)),
            (1, Some(-1)),
            (-1, None),
            (-1, None),
            (-1, Some(1)),
            (-1, Some(-1)),
        ];
        for (k, (a1, a2)) in plan.iter().enumerate() {
            recs.push(record(k, *a1, *a2, 0.0));
        }
        let ds = dataset(recs, RandProbs::default());
        let wf = empirical_weights(&ds).unwrap();
        // responder with A1 = 1: 1 / 0.6
        assert!((wf.weights[0] - 1.0 / 0.6).abs() < 1e-9);
        // non-responder with A1 = -1: 1 / (0.4 * 0.5)
        assert!((wf.weights[8] - 5.0).abs() < 1e-9);
        for s in wf.score_sums() {
            assert!(s.abs() < 1e-6 * ds.n() as f64);
        }
    }

    #[test]
    fn empirical_equals_known_when_balanced() {
        let ds = balanced();
        let emp = empirical_weights(&ds).unwrap();
        let known = known_weights(&ds);
        for (a, b) in emp.weights.iter().zip(&known.weights) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn empirical_requires_both_arms() {
        let ds = dataset(
            vec![
                record(0, 1, None, 0.0),
                record(1, 1, Some(1), 0.0),
                record(2, 1, Some(-1), 0.0),
                record(3, 1, None, 0.0),
            ],
            RandProbs::default(),
        );
        let err = empirical_weights(&ds).unwrap_err();
        assert!(err.to_string().contains("empirical positivity violated at stage 1"));
    }

    #[test]
    fn intercept_only_model_matches_closed_form() {
        let n = 10;
        let design = DMatrix::from_element(n, 1, 1.0);
        let response: Vec<bool> = (0..n).map(|k| k < 6).collect();
        let fit = fit_logistic(&design, &response, 1e-8, 50).unwrap();
        assert!(fit.converged);
        assert!((fit.coefficients[0] - (0.6f64 / 0.4).ln()).abs() < 1e-9);
        assert!((fit.coefficients[0] - 0.405_465_108).abs() < 1e-6);
    }

    #[test]
    fn separation_is_detected() {
        let n = 20;
        let design = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { i as f64 - 9.5 });
        let response: Vec<bool> = (0..n).map(|k| k >= 10).collect();
        assert!(matches!(
            fit_logistic(&design, &response, 1e-8, 50),
            Err(Error::Separation(_))
        ));
        let all_same = vec![true; n];
        assert!(matches!(
            fit_logistic(&design, &all_same, 1e-8, 50),
            Err(Error::Separation(_))
        ));
    }

    #[test]
    fn rank_deficiency_is_detected() {
        let design = DMatrix::from_fn(6, 2, |_, _| 1.0);
        let response = vec![true, false, true, false, true, false];
        assert!(matches!(
            fit_logistic(&design, &response, 1e-8, 50),
            Err(Error::RankDeficient(_))
        ));
    }

    #[test]
    fn intercept_only_modeled_equals_empirical() {
        let ds = balanced();
        let modeled = modeled_weights(&ds, &WeightModel::modeled(vec![], vec![])).unwrap();
        let emp = empirical_weights(&ds).unwrap();
        assert_eq!(modeled.weights, emp.weights);
        assert_eq!(modeled.scores, emp.scores);
    }

    #[test]
    fn modeled_weight_is_inverse_product() {
        // Received-arm probabilities 0.5 and 0.25 give weight 8.
        assert!((1.0 / (received(0.5, 1) * received(0.75, -1)) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn k1_rejects_post_baseline_variables() {
        let ds = balanced();
        let err = modeled_weights(&ds, &WeightModel::modeled(vec!["a1".into()], vec![])).unwrap_err();
        assert!(matches!(err, Error::InvalidModel(_)));
        let err = modeled_weights(&ds, &WeightModel::modeled(vec!["nope".into()], vec![])).unwrap_err();
        assert!(err.to_string().contains("nope"));
    }
}
