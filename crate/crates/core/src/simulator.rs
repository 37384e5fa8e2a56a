//! Monte Carlo studies of the techniques on synthetic SMART data.
//!
//! Every unit gets a full set of potential outcomes: the baseline `Y0`, `Y1`
//! under both first-stage arms, and the end-of-study outcome under all four
//! embedded interventions. One intervention pathway is then sampled with the
//! design's randomization probabilities and the matching outcomes are
//! observed.
//!
//! ```text
//! Y0 = γ0 + βᵀX + ε0
//! Y1 = (1 − ρ)(γ0 + βᵀX) + ρ Y0 + γ1 + γ2 a1 + ε1
//! R  ~ Bernoulli(r),  r = expit(η0 + η1 (Y1 − E[Y1 | a1]) / σ)
//! L  ~ Bernoulli(expit(0.5 (Y0 − γ0) / σ + 0.3 X1))
//! Y2 = (1 − 2k)(γ0 + βᵀX) + k Y0 + k Y1 + (1 − 2k)(γ1 + γ2 a1) + γ3 + γ4 a1
//!      + (1 − R)/(1 − r) (γ5 + γ6 a1) a2 + (R − r)(λ1 + λ2 a1) + ε2(R, L),   k = ρ / (1 + ρ)
//! ```
//!
//! `Var(ε1) = (1 − ρ²)σ²` and `ε2 = √v_R(R) z_R + √v_L(L) z_L` with the
//! variance components sized so that `Y2 − βᵀX` has variance exactly `σ²`
//! under each intervention, split 70/30 between the `R` and `L` parts.
//! `η0` is calibrated so that the marginal response rate is the configured
//! value in each arm.
//!
//! The `asic_like` preset has four correlated baseline covariates and a third
//! post-randomization occasion, generated only for the assigned pathway and
//! continuing the piecewise-linear trend of the second stage.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::contrasts::{estimate_contrast, ContrastRequest, ContrastSpec, VarianceMethod, Z_95};
use crate::data::{AiLabel, RandProbs, SmartDataset, TrialRecord};
use crate::error::{Error, Result};
use crate::technique::{fit_technique, Technique, TechniqueOptions};
use crate::weights::expit;

/// Source of the standard normal and uniform draws used by the generator.
pub trait Noise {
    fn std_normal(&mut self) -> f64;
    fn unit_uniform(&mut self) -> f64;
}

/// [`Noise`] backed by a random number generator.
pub struct RngNoise<R>(pub R);

impl<R: Rng> Noise for RngNoise<R> {
    fn std_normal(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }

    fn unit_uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }
}

/// Noise that is always at its center: normals are 0, uniforms are 0.5.
pub struct ZeroNoise;

impl Noise for ZeroNoise {
    fn std_normal(&mut self) -> f64 {
        0.0
    }

    fn unit_uniform(&mut self) -> f64 {
        0.5
    }
}

/// The random stream for replication `rep` of a study seeded with `seed`.
pub fn rep_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    /// One baseline covariate, outcomes at occasions 0, 1, 2.
    Proto,
    /// Four correlated baseline covariates, outcomes at occasions 0 to 3.
    AsicLike,
}

impl Design {
    pub fn t_final(self) -> usize {
        match self {
            Design::Proto => 2,
            Design::AsicLike => 3,
        }
    }

    pub fn covariate_names(self) -> Vec<String> {
        match self {
            Design::Proto => vec!["x".into()],
            Design::AsicLike => (1..=4).map(|k| format!("x{k}")).collect(),
        }
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Design::Proto => "proto",
            Design::AsicLike => "asic_like",
        })
    }
}

impl FromStr for Design {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proto" => Ok(Design::Proto),
            "asic_like" | "asic-like" => Ok(Design::AsicLike),
            other => Err(Error::InvalidConfig(format!(
                "unknown design `{other}` (expected proto or asic_like)"
            ))),
        }
    }
}

mod contrast_string {
    use super::*;

    pub fn serialize<S: Serializer>(spec: &ContrastSpec, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&spec.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<ContrastSpec, D::Error> {
        let text = String::deserialize(d)?;
        match text.parse::<ContrastRequest>().map_err(serde::de::Error::custom)? {
            ContrastRequest::Marginal(spec) => Ok(spec),
            ContrastRequest::NonresponderSecondStage => Err(serde::de::Error::custom(
                "the non-responder contrast cannot be a simulation target",
            )),
        }
    }
}

/// Settings of one simulation cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub design: Design,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub rho: f64,
    /// Correlation between the baseline covariate and the baseline outcome (proto only).
    pub nu: f64,
    /// `(1,1) − (−1,−1)` difference at the final occasion, in units of `σ`.
    pub delta: f64,
    pub sigma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub response_rate: f64,
    pub techniques: Vec<Technique>,
    #[serde(with = "contrast_string")]
    pub contrast: ContrastSpec,
    /// Keep every replication's estimates in the result.
    pub keep_reps: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            design: Design::Proto,
            n: 250,
            reps: 1000,
            seed: 1,
            rho: 0.5,
            nu: 0.3,
            delta: 0.3,
            sigma: 1.0,
            lambda1: 0.2,
            lambda2: 0.1,
            response_rate: 0.4,
            techniques: Technique::ALL.to_vec(),
            contrast: ContrastSpec::default_target(),
            keep_reps: false,
        }
    }
}

impl SimConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n < 20 {
            return bad(format!("n must be at least 20, got {}", self.n));
        }
        if self.reps < 1 {
            return bad("reps must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1), got {}", self.rho));
        }
        if !(0.0..1.0).contains(&self.nu) {
            return bad(format!("nu must lie in [0, 1), got {}", self.nu));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be positive".into());
        }
        if !(self.response_rate > 0.0 && self.response_rate < 1.0) {
            return bad("response_rate must lie in (0, 1)".into());
        }
        if ![self.delta, self.lambda1, self.lambda2].iter().all(|v| v.is_finite()) {
            return bad("delta, lambda1 and lambda2 must be finite".into());
        }
        if matches!(self.contrast, ContrastSpec::Custom { .. }) {
            return bad("the simulation target must be an intervention difference or a main effect".into());
        }
        Ok(())
    }

    /// `t0` followed by the other requested techniques, without repeats.
    pub fn technique_list(&self) -> Vec<Technique> {
        Technique::ALL
            .into_iter()
            .filter(|t| *t == Technique::T0 || self.techniques.contains(t))
            .collect()
    }

    /// Analysis settings used for every replication.
    pub fn technique_options(&self) -> TechniqueOptions {
        let xs = self.design.covariate_names();
        let mut k2 = xs.clone();
        k2.extend(["a1".to_string(), "l".to_string()]);
        TechniqueOptions {
            k1: xs,
            k2,
            ..TechniqueOptions::default()
        }
    }
}

/// Coefficients and derived constants of the generative model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerativeParams {
    pub design: Design,
    pub sigma: f64,
    pub rho: f64,
    pub gamma: [f64; 7],
    pub lambda1: f64,
    pub lambda2: f64,
    /// Baseline-covariate coefficients.
    pub beta: Vec<f64>,
    /// Lower Cholesky factor of the covariate covariance.
    pub covariate_chol: Vec<Vec<f64>>,
    pub eta0: f64,
    pub eta1: f64,
    /// `E[r]`, `E[r(1 − r)]` and `E[r/(1 − r)]` over units.
    pub mean_r: f64,
    pub mean_r_var: f64,
    pub mean_r_odds: f64,
    /// `v_L` by arm (`a1 = 1`, `a1 = −1`) and `L` (0, 1).
    pub v_l: [[f64; 2]; 2],
    /// `v_R` for responders, by arm.
    pub v_r_responder: [f64; 2],
    /// `v_R` for non-responders, by arm and `a2` (`1`, `−1`).
    pub v_r_nonresponder: [[f64; 2]; 2],
    /// Variance of the third-occasion innovation by arm (`asic_like`).
    pub v_3: [f64; 2],
    /// Mean outcome of each intervention at each occasion, from occasion 0.
    pub true_means: [Vec<f64>; 4],
    /// True value of the configured target contrast.
    pub theta: f64,
}

fn arm(a1: i8) -> usize {
    if a1 == 1 {
        0
    } else {
        1
    }
}

/// Expectation of `f(Z)` for `Z ~ N(0, s²)` by composite Simpson quadrature.
fn normal_expectation(s: f64, f: impl Fn(f64) -> f64) -> f64 {
    const HALF_WIDTH: f64 = 10.0;
    const STEPS: usize = 4000;
    let h = 2.0 * HALF_WIDTH / STEPS as f64;
    let density = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut total = 0.0;
    for k in 0..=STEPS {
        let z = -HALF_WIDTH + h * k as f64;
        let coef = if k == 0 || k == STEPS {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        total += coef * density(z) * f(s * z);
    }
    total * h / 3.0
}

fn calibrate_intercept(rate: f64, eta1: f64, s: f64) -> f64 {
    let (mut lo, mut hi) = (-30.0, 30.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if normal_expectation(s, |z| expit(mid + eta1 * z)) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn exch_cholesky(dim: usize, corr: f64) -> Vec<Vec<f64>> {
    let m = nalgebra::DMatrix::from_fn(dim, dim, |i, j| if i == j { 1.0 } else { corr });
    let l = m
        .cholesky()
        .expect("exchangeable correlation below 1 is positive definite")
        .l();
    (0..dim).map(|i| (0..dim).map(|j| l[(i, j)]).collect()).collect()
}

fn means_for(gamma: &[f64; 7], rho: f64, design: Design) -> [Vec<f64>; 4] {
    AiLabel::ALL.map(|ai| {
        let (a1, a2) = (f64::from(ai.a1()), f64::from(ai.a2nr()));
        let mu1 = gamma[0] + gamma[1] + gamma[2] * a1;
        let mu2 = gamma[0]
            + (gamma[1] + gamma[2] * a1) / (1.0 + rho)
            + gamma[3]
            + gamma[4] * a1
            + (gamma[5] + gamma[6] * a1) * a2;
        let mut m = vec![gamma[0], mu1, mu2];
        if design == Design::AsicLike {
            m.push(2.0 * mu2 - mu1);
        }
        m
    })
}

/// True value of a marginal contrast given the final-occasion intervention means.
pub fn true_contrast(spec: &ContrastSpec, final_means: [f64; 4]) -> Result<f64> {
    let m = final_means;
    match spec {
        ContrastSpec::AiDifference { ai, other } => Ok(m[ai.index()] - m[other.index()]),
        ContrastSpec::FirstStageMain => Ok(0.5 * ((m[0] - m[2]) + (m[1] - m[3]))),
        ContrastSpec::SecondStageMain => Ok(0.5 * ((m[0] - m[1]) + (m[2] - m[3]))),
        ContrastSpec::Custom { .. } => Err(Error::InvalidConfig(
            "a coefficient-vector contrast has no model-free true value".into(),
        )),
    }
}

pub fn derive_params(cfg: &SimConfig) -> Result<GenerativeParams> {
    cfg.check()?;
    let sigma = cfg.sigma;
    let rho = cfg.rho;
    let (beta, covariate_chol) = match cfg.design {
        Design::Proto => (vec![cfg.nu * sigma / (1.0 - cfg.nu * cfg.nu).sqrt()], vec![vec![1.0]]),
        Design::AsicLike => (vec![0.15 * sigma; 4], exch_cholesky(4, 0.2)),
    };
    let beta_var: f64 = {
        let dim = beta.len();
        let mut v = 0.0;
        for i in 0..dim {
            for j in 0..dim {
                let cov: f64 = (0..dim).map(|k| covariate_chol[i][k] * covariate_chol[j][k]).sum();
                v += beta[i] * beta[j] * cov;
            }
        }
        v
    };

    let base = [1.0, 0.3, 0.1, 0.2, 0.1, 0.1, 0.05];
    let base_means = means_for(&base, rho, cfg.design);
    let t = cfg.design.t_final();
    let base_effect = base_means[0][t] - base_means[3][t];
    let scale = cfg.delta * sigma / base_effect;
    let mut gamma = base;
    for k in [2, 4, 5, 6] {
        gamma[k] *= scale;
    }
    let true_means = means_for(&gamma, rho, cfg.design);
    let theta = true_contrast(&cfg.contrast, [0, 1, 2, 3].map(|d| true_means[d][t]))?;

    let eta1 = 1.0;
    let s = (1.0 + beta_var / (sigma * sigma)).sqrt();
    let eta0 = calibrate_intercept(cfg.response_rate, eta1, s);
    let mean_r = normal_expectation(s, |z| expit(eta0 + eta1 * z));
    let mean_r_var = normal_expectation(s, |z| {
        let r = expit(eta0 + eta1 * z);
        r * (1.0 - r)
    });
    let mean_r_odds = (eta0 + 0.5 * eta1 * eta1 * s * s).exp();
    let p_nonresponse = 1.0 - mean_r;

    let v_base = sigma * sigma * (1.0 - 2.0 * rho * rho / (1.0 + rho));
    let mut v_l = [[0.0; 2]; 2];
    let mut v_r_responder = [0.0; 2];
    let mut v_r_nonresponder = [[0.0; 2]; 2];
    let mut v_3 = [0.0; 2];
    for a1 in [1i8, -1] {
        let k = arm(a1);
        let a1f = f64::from(a1);
        let c = gamma[5] + gamma[6] * a1f;
        let lam = cfg.lambda1 + cfg.lambda2 * a1f;
        // Variance of the response-status terms averaged over a2; the a2 part is absorbed below.
        let v_resp = lam * lam * mean_r_var + c * c * mean_r_odds;
        let v_bar = v_base - v_resp;
        let cross = 2.0 * lam * c * mean_r;
        let min_nonresponder = 0.7 * v_bar * 1.25 - cross.abs() / p_nonresponse;
        if v_bar <= 0.0 || min_nonresponder <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "no residual variance left for the end-of-study innovation at rho = {rho}; \
                 reduce delta, lambda1 or lambda2"
            )));
        }
        v_l[k] = [0.3 * v_bar * 0.5, 0.3 * v_bar * 1.5];
        v_r_responder[k] = 0.7 * v_bar * 0.625;
        v_r_nonresponder[k] = [
            0.7 * v_bar * 1.25 + cross / p_nonresponse,
            0.7 * v_bar * 1.25 - cross / p_nonresponse,
        ];
        if cfg.design == Design::AsicLike {
            v_3[k] = sigma * sigma * (1.0 - 3.0 * rho * rho / (1.0 + 2.0 * rho)) - 4.0 * c * c * mean_r_odds;
            if v_3[k] <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "no residual variance left for the third occasion at rho = {rho}"
                )));
            }
        }
    }
    // Responders at the nominal rate and P(L = 1) = 1/2 make the split average 70/30.
    debug_assert!((mean_r - cfg.response_rate).abs() < 1e-8);

    Ok(GenerativeParams {
        design: cfg.design,
        sigma,
        rho,
        gamma,
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
        beta,
        covariate_chol,
        eta0,
        eta1,
        mean_r,
        mean_r_var,
        mean_r_odds,
        v_l,
        v_r_responder,
        v_r_nonresponder,
        v_3,
        true_means,
        theta,
    })
}

/// All potential outcomes of one synthetic unit. Arrays over first-stage arms
/// are ordered `a1 = 1, a1 = −1`; arrays over interventions follow [`AiLabel::ALL`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PotentialOutcomes {
    pub x: Vec<f64>,
    pub y0: f64,
    pub y1: [f64; 2],
    pub r_prob: [f64; 2],
    pub responder: [bool; 2],
    pub aux: [bool; 2],
    pub y2: [f64; 4],
    /// Third-occasion outcome on the assigned pathway (`asic_like`).
    pub y3: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimUnit {
    pub potential: PotentialOutcomes,
    pub record: TrialRecord,
}

pub fn generate_unit(noise: &mut impl Noise, p: &GenerativeParams, probs: RandProbs, id: usize) -> SimUnit {
    let g = &p.gamma;
    let sigma = p.sigma;
    let rho = p.rho;
    let z: Vec<f64> = p.beta.iter().map(|_| noise.std_normal()).collect();
    let x: Vec<f64> = p
        .covariate_chol
        .iter()
        .map(|row| row.iter().zip(&z).map(|(l, z)| l * z).sum())
        .collect();
    let bx: f64 = p.beta.iter().zip(&x).map(|(b, x)| b * x).sum();
    let y0 = g[0] + bx + sigma * noise.std_normal();

    let k = rho / (1.0 + rho);
    let mut y1 = [0.0; 2];
    let mut r_prob = [0.0; 2];
    let mut responder = [false; 2];
    let mut aux = [false; 2];
    let mut y2 = [0.0; 4];
    let mut shared_dev = [0.0; 2];
    let mut e2s = [0.0; 4];
    for a1 in [1i8, -1] {
        let j = arm(a1);
        let a1f = f64::from(a1);
        let y1_mean = g[0] + g[1] + g[2] * a1f;
        y1[j] = (1.0 - rho) * (g[0] + bx)
            + rho * y0
            + g[1]
            + g[2] * a1f
            + (1.0 - rho * rho).sqrt() * sigma * noise.std_normal();
        r_prob[j] = expit(p.eta0 + p.eta1 * (y1[j] - y1_mean) / sigma);
        responder[j] = noise.unit_uniform() < r_prob[j];
        let l_prob = expit(0.5 * (y0 - g[0]) / sigma + 0.3 * x[0]);
        aux[j] = noise.unit_uniform() < l_prob;
        let z_r = noise.std_normal();
        let z_l = noise.std_normal();

        let r = r_prob[j];
        let rf = if responder[j] { 1.0 } else { 0.0 };
        let c = g[5] + g[6] * a1f;
        let lam = p.lambda1 + p.lambda2 * a1f;
        let e_l = p.v_l[j][usize::from(aux[j])].sqrt() * z_l;
        let common = (1.0 - 2.0 * k) * (g[0] + bx)
            + k * y0
            + k * y1[j]
            + (1.0 - 2.0 * k) * (g[1] + g[2] * a1f)
            + g[3]
            + g[4] * a1f
            + (rf - r) * lam;
        shared_dev[j] = k * ((y0 - g[0] - bx) + (y1[j] - y1_mean - bx)) + (rf - r) * lam;
        for a2 in [1i8, -1] {
            let a2f = f64::from(a2);
            let v_r = if responder[j] {
                p.v_r_responder[j]
            } else {
                p.v_r_nonresponder[j][arm(a2)]
            };
            let e2 = v_r.sqrt() * z_r + e_l;
            let ai = AiLabel::new(a1, a2).expect("valid label");
            y2[ai.index()] = common + (1.0 - rf) / (1.0 - r) * c * a2f + e2;
            e2s[ai.index()] = e2;
        }
    }

    let a1: i8 = if noise.unit_uniform() < probs.p1 { 1 } else { -1 };
    let a2_draw: i8 = if noise.unit_uniform() < probs.p2 { 1 } else { -1 };
    let j = arm(a1);
    let a2 = (!responder[j]).then_some(a2_draw);
    let ai = AiLabel::new(a1, a2.unwrap_or(1)).expect("valid label");
    let mut y = vec![y0, y1[j], y2[ai.index()]];

    let y3 = (p.design == Design::AsicLike).then(|| {
        let a1f = f64::from(a1);
        let c = g[5] + g[6] * a1f;
        let means = &p.true_means[ai.index()];
        let a2f = f64::from(ai.a2nr());
        let base = means[3] - 2.0 * c * a2f;
        let rf = if responder[j] { 1.0 } else { 0.0 };
        let dev0 = y0 - g[0] - bx;
        let dev1 = y1[j] - means[1] - bx;
        base + bx
            + 2.0 * (1.0 - rf) / (1.0 - r_prob[j]) * c * a2f
            + rho / (1.0 + 2.0 * rho) * (dev0 + dev1 + shared_dev[j] + e2s[ai.index()])
            + p.v_3[j].sqrt() * noise.std_normal()
    });
    if let Some(v) = y3 {
        y.push(v);
    }
    let record = TrialRecord::new(format!("u{id}"), a1, responder[j], a2, x.clone(), y)
        .expect("generated record is valid")
        .with_aux(vec![if aux[j] { 1.0 } else { 0.0 }]);
    SimUnit {
        potential: PotentialOutcomes {
            x,
            y0,
            y1,
            r_prob,
            responder,
            aux,
            y2,
            y3,
        },
        record,
    }
}

/// One synthetic trial of `n` units drawn from `noise`.
pub fn generate_dataset(noise: &mut impl Noise, p: &GenerativeParams, n: usize) -> (SmartDataset, Vec<SimUnit>) {
    let probs = RandProbs::default();
    let units: Vec<SimUnit> = (0..n).map(|i| generate_unit(noise, p, probs, i)).collect();
    let ds = SmartDataset::new(
        units.iter().map(|u| u.record.clone()).collect(),
        p.design.t_final(),
        0,
        1,
        p.design.covariate_names(),
        vec!["l".into()],
        probs,
    )
    .expect("generated dataset is valid");
    (ds, units)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepEstimate {
    pub technique: Technique,
    pub estimate: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepFailure {
    pub rep: usize,
    pub technique: Technique,
    pub message: String,
    pub numerical: bool,
}

/// Fits every configured technique to replication `rep` and estimates the target contrast.
pub fn run_replication(
    cfg: &SimConfig,
    params: &GenerativeParams,
    rep: usize,
) -> std::result::Result<Vec<RepEstimate>, RepFailure> {
    let mut noise = RngNoise(rep_rng(cfg.seed, rep));
    let (ds, _) = generate_dataset(&mut noise, params, cfg.n);
    let opts = cfg.technique_options();
    cfg.technique_list()
        .into_iter()
        .map(|technique| {
            let result = fit_technique(&ds, technique, &opts)
                .and_then(|tf| estimate_contrast(&tf.fit, &cfg.contrast, VarianceMethod::default_for(&tf.fit)));
            match result {
                Ok(r) => Ok(RepEstimate {
                    technique,
                    estimate: r.estimate,
                    se: r.se,
                }),
                Err(e) => Err(RepFailure {
                    rep,
                    technique,
                    numerical: e.is_numerical(),
                    message: e.to_string(),
                }),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TechniqueSummary {
    pub technique: Technique,
    pub rmse: f64,
    pub relative_efficiency: f64,
    /// Percentage of replications closer to the truth than `t0`; absent for `t0`.
    pub pct_closer: Option<f64>,
    pub bias: f64,
    /// Percentage of 95% intervals containing the truth.
    pub coverage_95: f64,
    pub mean_se: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepRecord {
    pub rep: usize,
    pub technique: Technique,
    pub estimate: f64,
    pub se: f64,
    pub covered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimResult {
    pub config: SimConfig,
    pub true_value: f64,
    pub reps_used: usize,
    pub reps_excluded: usize,
    pub failures: Vec<RepFailure>,
    pub techniques: Vec<TechniqueSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_rep: Option<Vec<RepRecord>>,
}

impl SimResult {
    pub fn summary(&self, technique: Technique) -> Option<&TechniqueSummary> {
        self.techniques.iter().find(|s| s.technique == technique)
    }
}

/// Runs `cfg.reps` replications on `jobs` worker threads (all available when `None`).
/// Results do not depend on the number of workers.
pub fn run_study(cfg: &SimConfig, jobs: Option<usize>) -> Result<SimResult> {
    let params = derive_params(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))?;
    let outcomes: Vec<_> = pool.install(|| {
        (0..cfg.reps)
            .into_par_iter()
            .map(|rep| run_replication(cfg, &params, rep))
            .collect()
    });
    summarize(cfg, &params, outcomes)
}

fn summarize(
    cfg: &SimConfig,
    params: &GenerativeParams,
    outcomes: Vec<std::result::Result<Vec<RepEstimate>, RepFailure>>,
) -> Result<SimResult> {
    let theta = params.theta;
    let techniques = cfg.technique_list();
    let mut failures = Vec::new();
    let mut used: Vec<(usize, Vec<RepEstimate>)> = Vec::new();
    for (rep, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(est) => used.push((rep, est)),
            Err(f) => failures.push(f),
        }
    }
    if used.is_empty() {
        let first = failures.first().map(|f| f.message.clone()).unwrap_or_default();
        return Err(Error::AllReplicationsFailed(first));
    }

    let reps = used.len() as f64;
    let column = |k: usize| -> Vec<&RepEstimate> { used.iter().map(|(_, est)| &est[k]).collect() };
    let baseline = column(0);
    let rmse_of = |col: &[&RepEstimate]| (col.iter().map(|e| (e.estimate - theta).powi(2)).sum::<f64>() / reps).sqrt();
    let rmse_t0 = rmse_of(&baseline);

    let summaries = techniques
        .iter()
        .enumerate()
        .map(|(k, &technique)| {
            let col = column(k);
            let mean = col.iter().map(|e| e.estimate).sum::<f64>() / reps;
            let sd = (col.iter().map(|e| (e.estimate - mean).powi(2)).sum::<f64>() / reps).sqrt();
            let rmse = rmse_of(&col);
            let covered = col.iter().filter(|e| covers(e, theta)).count();
            let closer = col
                .iter()
                .zip(&baseline)
                .filter(|(e, b)| (e.estimate - theta).abs() < (b.estimate - theta).abs())
                .count();
            TechniqueSummary {
                technique,
                rmse,
                relative_efficiency: if k == 0 { 1.0 } else { rmse_t0 / rmse },
                pct_closer: (k != 0).then(|| 100.0 * closer as f64 / reps),
                bias: mean - theta,
                coverage_95: 100.0 * covered as f64 / reps,
                mean_se: col.iter().map(|e| e.se).sum::<f64>() / reps,
                sd,
            }
        })
        .collect();

    let per_rep = cfg.keep_reps.then(|| {
        used.iter()
            .flat_map(|(rep, est)| {
                est.iter().map(move |e| RepRecord {
                    rep: *rep,
                    technique: e.technique,
                    estimate: e.estimate,
                    se: e.se,
                    covered: covers(e, theta),
                })
            })
            .collect()
    });

    Ok(SimResult {
        config: cfg.clone(),
        true_value: theta,
        reps_used: used.len(),
        reps_excluded: failures.len(),
        failures,
        techniques: summaries,
        per_rep,
    })
}

fn covers(e: &RepEstimate, theta: f64) -> bool {
    (e.estimate - theta).abs() <= Z_95 * e.se
}
