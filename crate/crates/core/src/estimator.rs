//! Marginal structural mean models for the embedded adaptive interventions,
//! fitted by weighted estimating equations over the replicated rows.
//!
//! For a unit `i` consistent with interventions `d`, the estimating function is
//!
//! ```text
//! M_i(θ) = Σ_d W_i D_dᵀ V_d⁻¹ (Y_i − D_d θ)
//! ```
//!
//! where `D_d` stacks the regressor rows of the mean model at each occasion
//! used and `V_d` is the working covariance. Because every mean model here is
//! linear in `θ`, each solve is a weighted generalized least-squares step; the
//! working covariance parameters are re-estimated from weighted residuals
//! between steps.
//!
//! Two coefficient covariances are produced: the plug-in sandwich
//! `B⁻¹ (ΣM_iM_iᵀ/n) B⁻¹ / n`, and, when the weights were estimated, the same
//! sandwich with the meat projected off the assignment-model scores.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{replicate, AiLabel, SmartDataset};
use crate::error::{Error, Result};
use crate::linalg::{max_abs, spd_inverse, symmetrize};
use crate::weights::{WeightFit, WeightKind};

/// Margin kept between a projected correlation and the edge of its valid range.
pub const RHO_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ModelKind {
    /// `γ0 + γ1 a1 + γ2 a2NR + γ3 a1 a2NR` at the final occasion.
    CrossSectional,
    /// Piecewise-linear trajectory with a knot at `t_star`.
    Longitudinal { t_star: usize },
}

/// Mean model: the treatment part plus optional mean-centered baseline covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanModelSpec {
    pub kind: ModelKind,
    #[serde(default)]
    pub covariates: Vec<String>,
}

impl MeanModelSpec {
    pub fn cross_sectional() -> Self {
        MeanModelSpec {
            kind: ModelKind::CrossSectional,
            covariates: Vec::new(),
        }
    }

    pub fn covariate_adjusted(covariates: Vec<String>) -> Self {
        MeanModelSpec {
            kind: ModelKind::CrossSectional,
            covariates,
        }
    }

    pub fn longitudinal(t_star: usize) -> Self {
        MeanModelSpec {
            kind: ModelKind::Longitudinal { t_star },
            covariates: Vec::new(),
        }
    }

    pub fn with_covariates(mut self, covariates: Vec<String>) -> Self {
        self.covariates = covariates;
        self
    }

    pub fn is_longitudinal(&self) -> bool {
        matches!(self.kind, ModelKind::Longitudinal { .. })
    }

    pub fn n_gamma(&self) -> usize {
        match self.kind {
            ModelKind::CrossSectional => 4,
            ModelKind::Longitudinal { .. } => 7,
        }
    }

    pub fn n_params(&self) -> usize {
        self.n_gamma() + self.covariates.len()
    }

    pub fn coefficient_names(&self) -> Vec<String> {
        (0..self.n_gamma())
            .map(|k| format!("gamma{k}"))
            .chain(self.covariates.iter().map(|c| format!("beta_{c}")))
            .collect()
    }

    /// Occasions entering the fit.
    pub fn occasions(&self, ds: &SmartDataset) -> Vec<usize> {
        match self.kind {
            ModelKind::CrossSectional => vec![ds.t_final],
            ModelKind::Longitudinal { .. } => ds.occasions().collect(),
        }
    }

    pub fn check(&self, ds: &SmartDataset) -> Result<()> {
        if let ModelKind::Longitudinal { t_star } = self.kind {
            if ds.t_final < 2 {
                return Err(Error::InvalidModel("longitudinal technique requires T ≥ 2".into()));
            }
            if !(1..ds.t_final).contains(&t_star) {
                return Err(Error::InvalidModel(format!(
                    "longitudinal model needs 1 <= t_star < T (t_star = {t_star}, T = {})",
                    ds.t_final
                )));
            }
            if ds.first_occasion == 1 && t_star == 1 {
                return Err(Error::InvalidModel(
                    "longitudinal model with t_star = 1 needs a baseline outcome column y_0".into(),
                ));
            }
        }
        for c in &self.covariates {
            if ds.covariate_index(c).is_none() {
                return Err(Error::InvalidModel(format!("unknown covariate `{c}`")));
            }
        }
        Ok(())
    }
}

/// Regressor row of the mean model for intervention `ai` at occasion `t`.
fn design_row(ai: AiLabel, spec: &MeanModelSpec, x: &[f64], t: usize, out: &mut [f64]) {
    let a1 = f64::from(ai.a1());
    let a2 = f64::from(ai.a2nr());
    match spec.kind {
        ModelKind::CrossSectional => {
            out[..4].copy_from_slice(&[1.0, a1, a2, a1 * a2]);
        }
        ModelKind::Longitudinal { t_star } => {
            let early = t.min(t_star) as f64;
            let late = t.saturating_sub(t_star) as f64;
            out[..7].copy_from_slice(&[1.0, early, early * a1, late, late * a1, late * a2, late * a1 * a2]);
        }
    }
    out[spec.n_gamma()..].copy_from_slice(x);
}

/// Jacobian of the mean trajectory of `ai` with respect to the coefficients:
/// one row per occasion in `occasions` (a single final-occasion row for the
/// cross-sectional models). `x` holds the already-centered covariates named
/// in `spec`.
pub fn design_rows(ai: AiLabel, spec: &MeanModelSpec, x: &[f64], occasions: &[usize]) -> DMatrix<f64> {
    assert_eq!(x.len(), spec.covariates.len(), "covariate vector length");
    let times: Vec<usize> = match spec.kind {
        ModelKind::CrossSectional => occasions.last().copied().into_iter().collect(),
        ModelKind::Longitudinal { .. } => occasions.to_vec(),
    };
    let p = spec.n_params();
    let mut m = DMatrix::zeros(times.len(), p);
    let mut row = vec![0.0; p];
    for (r, &t) in times.iter().enumerate() {
        design_row(ai, spec, x, t, &mut row);
        for (c, v) in row.iter().enumerate() {
            m[(r, c)] = *v;
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    Independence,
    ExchHomogeneous,
    ExchHeterogeneous,
}

/// Working covariance `S(σ) Exch(ρ) S(σ)`; the homogeneous and independence
/// forms are special cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkingCovariance {
    pub kind: CovarianceKind,
    /// One entry, or one per occasion for the heterogeneous kind.
    pub sigma: Vec<f64>,
    pub rho: f64,
}

impl WorkingCovariance {
    pub fn independence(sigma: f64) -> Self {
        WorkingCovariance {
            kind: CovarianceKind::Independence,
            sigma: vec![sigma],
            rho: 0.0,
        }
    }

    pub fn homogeneous(sigma: f64, rho: f64) -> Self {
        WorkingCovariance {
            kind: CovarianceKind::ExchHomogeneous,
            sigma: vec![sigma],
            rho,
        }
    }

    pub fn heterogeneous(sigma: Vec<f64>, rho: f64) -> Self {
        WorkingCovariance {
            kind: CovarianceKind::ExchHeterogeneous,
            sigma,
            rho,
        }
    }

    fn sigma_at(&self, t: usize) -> f64 {
        if self.sigma.len() == 1 {
            self.sigma[0]
        } else {
            self.sigma[t]
        }
    }
}

/// Open interval of correlations for which `Exch(ρ)` of size `m` is positive definite.
pub fn rho_bounds(m: usize) -> (f64, f64) {
    if m <= 1 {
        (f64::NEG_INFINITY, f64::INFINITY)
    } else {
        (-1.0 / (m as f64 - 1.0), 1.0)
    }
}

pub fn working_cov_matrix(wc: &WorkingCovariance, m: usize) -> Result<DMatrix<f64>> {
    if wc.sigma.is_empty() || (wc.sigma.len() != 1 && wc.sigma.len() != m) {
        return Err(Error::InvalidModel(format!(
            "working covariance needs 1 or {m} standard deviations, got {}",
            wc.sigma.len()
        )));
    }
    if wc.kind != CovarianceKind::ExchHeterogeneous && wc.sigma.len() != 1 {
        return Err(Error::InvalidModel(
            "only the heterogeneous working covariance takes per-occasion sigmas".into(),
        ));
    }
    if wc.sigma.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::InvalidModel(
            "working standard deviations must be positive".into(),
        ));
    }
    let rho = match wc.kind {
        CovarianceKind::Independence => 0.0,
        _ => wc.rho,
    };
    let (lo, hi) = rho_bounds(m);
    if !(rho > lo && rho < hi) {
        return Err(Error::InvalidModel(format!(
            "ρ = {rho} gives a working covariance that is not positive definite"
        )));
    }
    Ok(DMatrix::from_fn(m, m, |s, t| {
        let corr = if s == t { 1.0 } else { rho };
        wc.sigma_at(s) * corr * wc.sigma_at(t)
    }))
}

/// Moment estimates of the working covariance parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimate {
    pub sigma: Vec<f64>,
    pub rho: f64,
    /// The raw correlation before any projection.
    pub rho_raw: f64,
    pub rho_projected: bool,
}

/// Weighted moment estimates of `σ` (or `σ_t`) and `ρ` from per-row residual
/// vectors. Correlations outside the valid range are projected inside it.
pub fn moment_update(residuals: &[Vec<f64>], weights: &[f64], heterogeneous: bool) -> Result<MomentEstimate> {
    let total: f64 = weights.iter().sum();
    if total.is_nan() || total <= 0.0 || residuals.is_empty() {
        return Err(Error::Singular("zero total weight in moment update".into()));
    }
    let m = residuals[0].len();
    let mut second = DMatrix::<f64>::zeros(m, m);
    for (e, &w) in residuals.iter().zip(weights) {
        for s in 0..m {
            for t in s..m {
                second[(s, t)] += w * e[s] * e[t];
            }
        }
    }
    second /= total;

    let var_t: Vec<f64> = (0..m).map(|t| second[(t, t)]).collect();
    let sigma: Vec<f64> = if heterogeneous {
        var_t.iter().map(|v| v.sqrt()).collect()
    } else {
        vec![(var_t.iter().sum::<f64>() / m as f64).sqrt()]
    };
    let sd = |t: usize| if heterogeneous { sigma[t] } else { sigma[0] };
    if sigma.iter().any(|s| s.is_nan() || *s <= 0.0) {
        return Err(Error::Singular("zero residual variance in moment update".into()));
    }

    let mut rho_raw = 0.0;
    let mut pairs = 0usize;
    for s in 0..m {
        for t in s + 1..m {
            rho_raw += second[(s, t)] / (sd(s) * sd(t));
            pairs += 1;
        }
    }
    if pairs > 0 {
        rho_raw /= pairs as f64;
    }
    let (lo, hi) = rho_bounds(m);
    let rho = rho_raw.clamp(lo + RHO_MARGIN, hi - RHO_MARGIN);
    Ok(MomentEstimate {
        sigma,
        rho,
        rho_raw,
        rho_projected: rho != rho_raw,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub working: CovarianceKind,
    /// Separate variance per intervention (cross-sectional models only).
    pub ai_specific_variance: bool,
    /// Inflate both covariance estimates by `n / (n − p)`.
    pub small_sample_correction: bool,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            working: CovarianceKind::Independence,
            ai_specific_variance: false,
            small_sample_correction: false,
            tol: 1e-8,
            max_iter: 50,
        }
    }
}

impl FitOptions {
    pub fn with_working(working: CovarianceKind) -> Self {
        FitOptions {
            working,
            ..FitOptions::default()
        }
    }
}

/// A solved estimating equation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeeFit {
    pub spec: MeanModelSpec,
    pub options: FitOptions,
    pub coefficient_names: Vec<String>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub working: WorkingCovariance,
    /// Per-intervention standard deviations when fitted with `ai_specific_variance`.
    pub ai_sigma: Option<[f64; 4]>,
    pub rho_projected: bool,
    pub vcov_known: DMatrix<f64>,
    pub vcov_weight_adjusted: Option<DMatrix<f64>>,
    pub weight_kind: WeightKind,
    pub iterations: usize,
    pub converged: bool,
    pub n: usize,
    pub occasions: Vec<usize>,
    pub covariate_means: Vec<f64>,
}

impl GeeFit {
    pub fn theta(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.gamma.len() + self.beta.len(),
            self.gamma.iter().chain(&self.beta).copied(),
        )
    }

    pub fn n_params(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    /// Mean of intervention `ai` at the final occasion, at the covariate means.
    pub fn ai_mean(&self, ai: AiLabel) -> f64 {
        let zeros = vec![0.0; self.beta.len()];
        let d = design_rows(ai, &self.spec, &zeros, &self.occasions);
        (d.row(d.nrows() - 1) * self.theta())[0]
    }
}

struct Row {
    group: usize,
    design: DMatrix<f64>,
    y: DVector<f64>,
}

struct Unit {
    weight: f64,
    rows: Vec<Row>,
}

/// Replicated, centered data for one mean model.
struct Problem {
    units: Vec<Unit>,
    p: usize,
    m: usize,
    covariate_means: Vec<f64>,
    occasions: Vec<usize>,
    /// `Σ w D_sᵀ D_t` per group, indexed `s * m + t`.
    gram: Vec<Vec<DMatrix<f64>>>,
    /// `Σ w D_sᵀ y_t` per group, indexed `s * m + t`.
    cross: Vec<Vec<DVector<f64>>>,
}

impl Problem {
    fn build(ds: &SmartDataset, wf: &WeightFit, spec: &MeanModelSpec, by_ai: bool) -> Result<Problem> {
        spec.check(ds)?;
        if wf.weights.len() != ds.n() {
            return Err(Error::InvalidModel(format!(
                "{} weights for {} records",
                wf.weights.len(),
                ds.n()
            )));
        }
        if wf.weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidModel("weights must be positive and finite".into()));
        }
        if ds.n() == 0 {
            return Err(Error::InvalidDataset("no records".into()));
        }
        let cov_idx: Vec<usize> = spec
            .covariates
            .iter()
            .map(|c| ds.covariate_index(c).expect("checked"))
            .collect();
        let n = ds.n() as f64;
        let covariate_means: Vec<f64> = cov_idx
            .iter()
            .map(|&k| ds.records.iter().map(|r| r.x[k]).sum::<f64>() / n)
            .collect();
        let occasions = spec.occasions(ds);
        let positions: Vec<usize> = occasions.iter().map(|t| t - ds.first_occasion).collect();
        let (p, m) = (spec.n_params(), occasions.len());
        let n_groups = if by_ai { 4 } else { 1 };
        let mut gram = vec![vec![DMatrix::zeros(p, p); m * m]; n_groups];
        let mut cross = vec![vec![DVector::zeros(p); m * m]; n_groups];

        let mut units: Vec<Unit> = wf
            .weights
            .iter()
            .map(|&weight| Unit {
                weight,
                rows: Vec::with_capacity(2),
            })
            .collect();
        for row in replicate(ds) {
            let x: Vec<f64> = cov_idx
                .iter()
                .zip(&covariate_means)
                .map(|(&k, mean)| row.x[k] - mean)
                .collect();
            let design = design_rows(row.ai, spec, &x, &occasions);
            let y = DVector::from_iterator(m, positions.iter().map(|&k| row.y[k]));
            let group = if by_ai { row.ai.index() } else { 0 };
            let w = wf.weights[row.source_index];
            for s in 0..m {
                let ds_row = design.row(s).transpose() * w;
                for t in 0..m {
                    gram[group][s * m + t].ger(1.0, &ds_row, &design.row(t).transpose(), 1.0);
                    cross[group][s * m + t].axpy(y[t], &ds_row, 1.0);
                }
            }
            units[row.source_index].rows.push(Row { group, design, y });
        }
        Ok(Problem {
            units,
            p,
            m,
            covariate_means,
            occasions,
            gram,
            cross,
        })
    }

    fn gls(&self, vinv: &[DMatrix<f64>]) -> Result<DVector<f64>> {
        let mut lhs = DMatrix::zeros(self.p, self.p);
        let mut rhs = DVector::zeros(self.p);
        for (g, v) in vinv.iter().enumerate() {
            for s in 0..self.m {
                for t in 0..self.m {
                    let k = s * self.m + t;
                    lhs += &self.gram[g][k] * v[(s, t)];
                    rhs.axpy(v[(s, t)], &self.cross[g][k], 1.0);
                }
            }
        }
        let inv = spd_inverse(&lhs, "weighted information matrix")?;
        Ok(inv * rhs)
    }

    /// Bread `B` and per-unit estimating functions `M_i` at `theta`.
    fn bread_and_scores(&self, theta: &DVector<f64>, vinv: &[DMatrix<f64>]) -> (DMatrix<f64>, Vec<DVector<f64>>) {
        let n = self.units.len() as f64;
        let mut bread = DMatrix::zeros(self.p, self.p);
        let mut ms = Vec::with_capacity(self.units.len());
        for unit in &self.units {
            let mut mi = DVector::zeros(self.p);
            for row in &unit.rows {
                let dtv = row.design.transpose() * &vinv[row.group] * unit.weight;
                bread += &dtv * &row.design;
                mi += &dtv * (&row.y - &row.design * theta);
            }
            ms.push(mi);
        }
        (bread / n, ms)
    }

    fn residuals(&self, theta: &DVector<f64>) -> (Vec<Vec<f64>>, Vec<f64>, Vec<usize>) {
        let mut res = Vec::new();
        let mut w = Vec::new();
        let mut groups = Vec::new();
        for unit in &self.units {
            for row in &unit.rows {
                let e = &row.y - &row.design * theta;
                res.push(e.iter().copied().collect());
                w.push(unit.weight);
                groups.push(row.group);
            }
        }
        (res, w, groups)
    }
}

fn inverse_covariances(wc: &WorkingCovariance, ai_sigma: Option<[f64; 4]>, m: usize) -> Result<Vec<DMatrix<f64>>> {
    match ai_sigma {
        Some(sig) => sig
            .iter()
            .map(|s| Ok(DMatrix::from_element(1, 1, 1.0 / (s * s))))
            .collect(),
        None => {
            let v = working_cov_matrix(wc, m)?;
            Ok(vec![spd_inverse(&v, "working covariance")?])
        }
    }
}

/// Solves the weighted estimating equation for `spec` under the chosen working covariance.
///
/// Starts from an independence working covariance and alternates a GLS
/// solve with a moment update of `(σ, ρ)` until the largest coefficient
/// change is below `opts.tol`.
pub fn solve_estimating_equation(
    ds: &SmartDataset,
    wf: &WeightFit,
    spec: &MeanModelSpec,
    opts: &FitOptions,
) -> Result<GeeFit> {
    let problem = Problem::build(ds, wf, spec, opts.ai_specific_variance)?;
    if opts.ai_specific_variance && problem.m != 1 {
        return Err(Error::InvalidModel(
            "intervention-specific variances are supported for cross-sectional models only".into(),
        ));
    }
    let m = problem.m;
    let mut wc = WorkingCovariance {
        kind: opts.working,
        sigma: vec![
            1.0;
            if opts.working == CovarianceKind::ExchHeterogeneous {
                m
            } else {
                1
            }
        ],
        rho: 0.0,
    };
    let mut ai_sigma = opts.ai_specific_variance.then_some([1.0; 4]);
    let mut rho_projected = false;
    let fixed_point = opts.working == CovarianceKind::Independence && !opts.ai_specific_variance;

    let mut previous: Option<DVector<f64>> = None;
    for iter in 1..=opts.max_iter.max(1) {
        let vinv = inverse_covariances(&wc, ai_sigma, m)?;
        let theta = problem.gls(&vinv)?;
        let done = fixed_point
            || previous
                .as_ref()
                .is_some_and(|prev| max_abs(&(&theta - prev)) < opts.tol);
        if done {
            if fixed_point {
                // σ is reported only; it cancels from θ and both covariances.
                let (res, w, _) = problem.residuals(&theta);
                wc.sigma = moment_update(&res, &w, false)?.sigma;
            }
            return finish(ds, wf, spec, opts, &problem, theta, wc, ai_sigma, rho_projected, iter);
        }

        let (res, w, groups) = problem.residuals(&theta);
        if let Some(sig) = ai_sigma.as_mut() {
            for (g, s) in sig.iter_mut().enumerate() {
                let (r, wg): (Vec<_>, Vec<_>) = res
                    .iter()
                    .zip(&w)
                    .zip(&groups)
                    .filter(|(_, &gr)| gr == g)
                    .map(|((r, w), _)| (r.clone(), *w))
                    .unzip();
                *s = moment_update(&r, &wg, false)?.sigma[0];
            }
        } else {
            let est = moment_update(&res, &w, opts.working == CovarianceKind::ExchHeterogeneous)?;
            wc.sigma = est.sigma;
            if opts.working != CovarianceKind::Independence {
                wc.rho = est.rho;
                rho_projected = est.rho_projected;
            }
        }
        previous = Some(theta);
    }
    Err(Error::NonConvergence {
        what: "estimating equation".into(),
        iterations: opts.max_iter,
    })
}

#[allow(clippy::too_many_arguments)]
fn finish(
    ds: &SmartDataset,
    wf: &WeightFit,
    spec: &MeanModelSpec,
    opts: &FitOptions,
    problem: &Problem,
    theta: DVector<f64>,
    working: WorkingCovariance,
    ai_sigma: Option<[f64; 4]>,
    rho_projected: bool,
    iterations: usize,
) -> Result<GeeFit> {
    let ng = spec.n_gamma();
    let mut fit = GeeFit {
        spec: spec.clone(),
        options: *opts,
        coefficient_names: spec.coefficient_names(),
        gamma: theta.iter().take(ng).copied().collect(),
        beta: theta.iter().skip(ng).copied().collect(),
        working,
        ai_sigma,
        rho_projected,
        vcov_known: DMatrix::zeros(problem.p, problem.p),
        vcov_weight_adjusted: None,
        weight_kind: wf.kind,
        iterations,
        converged: true,
        n: ds.n(),
        occasions: problem.occasions.clone(),
        covariate_means: problem.covariate_means.clone(),
    };
    let parts = SandwichParts::compute(problem, &fit)?;
    fit.vcov_known = parts.sandwich(&fit);
    if wf.is_estimated() {
        fit.vcov_weight_adjusted = Some(parts.weight_adjusted(&fit, wf)?);
    }
    Ok(fit)
}

struct SandwichParts {
    bread_inv: DMatrix<f64>,
    scores: Vec<DVector<f64>>,
}

impl SandwichParts {
    fn compute(problem: &Problem, fit: &GeeFit) -> Result<SandwichParts> {
        let vinv = inverse_covariances(&fit.working, fit.ai_sigma, problem.m)?;
        let (bread, scores) = problem.bread_and_scores(&fit.theta(), &vinv);
        let bread_inv = spd_inverse(&bread, "bread matrix")?;
        Ok(SandwichParts { bread_inv, scores })
    }

    fn finalize(&self, meat: DMatrix<f64>, fit: &GeeFit) -> DMatrix<f64> {
        let n = self.scores.len() as f64;
        let mut v = &self.bread_inv * meat * &self.bread_inv / n;
        if fit.options.small_sample_correction {
            let p = fit.n_params() as f64;
            v *= n / (n - p).max(1.0);
        }
        symmetrize(&v)
    }

    fn mean_outer(&self) -> DMatrix<f64> {
        let p = self.bread_inv.nrows();
        let mut meat = DMatrix::zeros(p, p);
        for m in &self.scores {
            meat += m * m.transpose();
        }
        meat / self.scores.len() as f64
    }

    fn sandwich(&self, fit: &GeeFit) -> DMatrix<f64> {
        self.finalize(self.mean_outer(), fit)
    }

    fn weight_adjusted(&self, fit: &GeeFit, wf: &WeightFit) -> Result<DMatrix<f64>> {
        let n = self.scores.len();
        let q = wf.score_dim();
        if q == 0 || wf.scores.len() != n {
            return Err(Error::MissingVariance(
                "weight-adjusted variance needs assignment-model scores".into(),
            ));
        }
        let p = self.bread_inv.nrows();
        let mut ms = DMatrix::zeros(p, q);
        let mut ss = DMatrix::zeros(q, q);
        for (m, s) in self.scores.iter().zip(&wf.scores) {
            let s = DVector::from_column_slice(s);
            ms += m * s.transpose();
            ss += &s * s.transpose();
        }
        ms /= n as f64;
        ss /= n as f64;
        let ss_inv = spd_inverse(&ss, "score Gram matrix")?;
        let meat = self.mean_outer() - &ms * ss_inv * ms.transpose();
        Ok(self.finalize(symmetrize(&meat), fit))
    }
}

/// Plug-in sandwich covariance of the coefficients of `fit`.
pub fn sandwich_vcov(fit: &GeeFit, ds: &SmartDataset, wf: &WeightFit) -> Result<DMatrix<f64>> {
    let problem = Problem::build(ds, wf, &fit.spec, fit.ai_sigma.is_some())?;
    Ok(SandwichParts::compute(&problem, fit)?.sandwich(fit))
}

/// Sandwich covariance accounting for estimation of the assignment-model parameters.
pub fn weight_adjusted_vcov(fit: &GeeFit, ds: &SmartDataset, wf: &WeightFit) -> Result<DMatrix<f64>> {
    let problem = Problem::build(ds, wf, &fit.spec, fit.ai_sigma.is_some())?;
    SandwichParts::compute(&problem, fit)?.weight_adjusted(fit, wf)
}

/// `(1/n) Σ_i M_i(θ̂)`: the estimating equation evaluated at the fit.
pub fn estimating_equation(fit: &GeeFit, ds: &SmartDataset, wf: &WeightFit) -> Result<DVector<f64>> {
    let problem = Problem::build(ds, wf, &fit.spec, fit.ai_sigma.is_some())?;
    let vinv = inverse_covariances(&fit.working, fit.ai_sigma, problem.m)?;
    let (_, scores) = problem.bread_and_scores(&fit.theta(), &vinv);
    let n = scores.len() as f64;
    Ok(scores.iter().fold(DVector::zeros(problem.p), |acc, m| acc + m) / n)
}

/// Weighted means of the final outcome for each embedded intervention.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellMeans {
    /// `μ̂^(d)` for `d = 1..=4`.
    pub mu_hat: [f64; 4],
    /// Covariance of the estimated means.
    pub cov: [[f64; 4]; 4],
    /// Weighted covariance of the outcomes shared by two interventions,
    /// `Σ W² 1_k 1_l (Y − μ̂_k)(Y − μ̂_l) / Σ W² 1_k 1_l`; zero when no unit is shared.
    pub outcome_cov: [[f64; 4]; 4],
    /// Pairs of interventions with no unit in common.
    pub disjoint: [[bool; 4]; 4],
}

/// Inverse-probability-weighted means of the final outcome per intervention,
/// with their covariance.
pub fn ipw_cell_means(ds: &SmartDataset, wf: &WeightFit) -> Result<CellMeans> {
    if wf.weights.len() != ds.n() {
        return Err(Error::InvalidModel("one weight per record required".into()));
    }
    let indicator: Vec<[bool; 4]> = ds
        .records
        .iter()
        .map(|rec| {
            let mut ind = [false; 4];
            for ai in crate::data::consistent_ais(rec) {
                ind[ai.index()] = true;
            }
            ind
        })
        .collect();
    let y: Vec<f64> = ds.records.iter().map(|r| r.final_outcome()).collect();
    let w = &wf.weights;

    let mut mu_hat = [0.0; 4];
    let mut wsum = [0.0; 4];
    for d in 0..4 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..ds.n() {
            if indicator[i][d] {
                num += w[i] * y[i];
                den += w[i];
            }
        }
        if den == 0.0 {
            return Err(Error::Positivity(format!(
                "no units consistent with intervention {}",
                AiLabel::ALL[d]
            )));
        }
        mu_hat[d] = num / den;
        wsum[d] = den;
    }

    let mut cov = [[0.0; 4]; 4];
    let mut outcome_cov = [[0.0; 4]; 4];
    let mut disjoint = [[false; 4]; 4];
    for k in 0..4 {
        for l in 0..4 {
            let (mut num, mut shared) = (0.0, 0.0);
            for i in 0..ds.n() {
                if indicator[i][k] && indicator[i][l] {
                    let w2 = w[i] * w[i];
                    num += w2 * (y[i] - mu_hat[k]) * (y[i] - mu_hat[l]);
                    shared += w2;
                }
            }
            cov[k][l] = num / (wsum[k] * wsum[l]);
            if shared == 0.0 {
                disjoint[k][l] = true;
            } else {
                outcome_cov[k][l] = num / shared;
            }
        }
    }
    Ok(CellMeans {
        mu_hat,
        cov,
        outcome_cov,
        disjoint,
    })
}
