//! Linear contrasts of fitted mean models: differences between interventions,
//! stage-specific main effects and custom coefficient combinations, with Wald
//! intervals.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{AiLabel, SmartDataset};
use crate::error::{Error, Result};
use crate::estimator::{design_rows, GeeFit, MeanModelSpec};
use crate::linalg::wls_robust;

/// Two-sided 95% standard normal quantile.
pub const Z_95: f64 = 1.959964;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ContrastSpec {
    /// Mean of the first intervention minus the mean of the second.
    AiDifference {
        ai: AiLabel,
        other: AiLabel,
    },
    FirstStageMain,
    SecondStageMain,
    /// Raw coefficient vector.
    Custom {
        vector: Vec<f64>,
    },
}

impl ContrastSpec {
    pub fn difference(ai: AiLabel, other: AiLabel) -> Self {
        ContrastSpec::AiDifference { ai, other }
    }

    /// The `(1,1) − (−1,−1)` comparison.
    pub fn default_target() -> Self {
        ContrastSpec::difference(AiLabel::ALL[0], AiLabel::ALL[3])
    }
}

impl fmt::Display for ContrastSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContrastSpec::AiDifference { ai, other } => write!(f, "{ai}-{other}"),
            ContrastSpec::FirstStageMain => f.write_str("first-stage"),
            ContrastSpec::SecondStageMain => f.write_str("second-stage"),
            ContrastSpec::Custom { vector } => {
                let parts: Vec<String> = vector.iter().map(|v| v.to_string()).collect();
                write!(f, "[{}]", parts.join(","))
            }
        }
    }
}

/// A contrast as requested on the command line.
#[derive(Debug, Clone, PartialEq)]
pub enum ContrastRequest {
    Marginal(ContrastSpec),
    /// Second-stage comparison among non-responders only.
    NonresponderSecondStage,
}

impl fmt::Display for ContrastRequest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContrastRequest::Marginal(spec) => spec.fmt(f),
            ContrastRequest::NonresponderSecondStage => f.write_str("second-stage|nonresponders"),
        }
    }
}

impl FromStr for ContrastRequest {
    type Err = Error;

    /// Accepts `(1,1)-(-1,-1)`, `first-stage`, `second-stage`,
    /// `second-stage|nonresponders`, or a coefficient vector such as
    /// `0,2,2,0` (optionally in brackets).
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        match compact.as_str() {
            "first-stage" => return Ok(ContrastRequest::Marginal(ContrastSpec::FirstStageMain)),
            "second-stage" => return Ok(ContrastRequest::Marginal(ContrastSpec::SecondStageMain)),
            "second-stage|nonresponders" => return Ok(ContrastRequest::NonresponderSecondStage),
            _ => {}
        }
        if compact.starts_with('(') {
            let split = compact
                .find(")-(")
                .ok_or_else(|| Error::InvalidConfig(format!("cannot parse contrast `{s}`")))?;
            let ai: AiLabel = compact[..=split].parse()?;
            let other: AiLabel = compact[split + 2..].parse()?;
            return Ok(ContrastRequest::Marginal(ContrastSpec::difference(ai, other)));
        }
        let inner = compact.trim_start_matches('[').trim_end_matches(']');
        let vector = inner
            .split(',')
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| {
                Error::InvalidConfig(format!(
                    "cannot parse contrast `{s}`; expected `(a1,a2)-(a1,a2)`, `first-stage`, \
                     `second-stage`, `second-stage|nonresponders` or a coefficient vector"
                ))
            })?;
        Ok(ContrastRequest::Marginal(ContrastSpec::Custom { vector }))
    }
}

fn final_row(ai: AiLabel, model: &MeanModelSpec, t_final: usize) -> DVector<f64> {
    let zeros = vec![0.0; model.covariates.len()];
    design_rows(ai, model, &zeros, &[t_final]).row(0).transpose()
}

/// Coefficient-space vector `c` with `estimate = cᵀθ̂`, evaluated at the final occasion `t_final`.
pub fn contrast_vector(spec: &ContrastSpec, model: &MeanModelSpec, t_final: usize) -> Result<DVector<f64>> {
    let row = |a1: i8, a2: i8| final_row(AiLabel::new(a1, a2).expect("valid label"), model, t_final);
    Ok(match spec {
        ContrastSpec::AiDifference { ai, other } => final_row(*ai, model, t_final) - final_row(*other, model, t_final),
        ContrastSpec::FirstStageMain => ((row(1, 1) - row(-1, 1)) + (row(1, -1) - row(-1, -1))) * 0.5,
        ContrastSpec::SecondStageMain => ((row(1, 1) - row(1, -1)) + (row(-1, 1) - row(-1, -1))) * 0.5,
        ContrastSpec::Custom { vector } => {
            if vector.len() != model.n_params() {
                return Err(Error::InvalidConfig(format!(
                    "contrast vector has {} entries but the model has {} coefficients",
                    vector.len(),
                    model.n_params()
                )));
            }
            DVector::from_column_slice(vector)
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMethod {
    /// Sandwich treating the weights as known.
    Known,
    /// Sandwich corrected for estimation of the weights.
    WeightAdjusted,
    /// Heteroskedasticity-robust least squares (non-responder subsample).
    Robust,
}

impl VarianceMethod {
    /// Weight-adjusted when the fit carries it, otherwise known.
    pub fn default_for(fit: &GeeFit) -> Self {
        if fit.vcov_weight_adjusted.is_some() {
            VarianceMethod::WeightAdjusted
        } else {
            VarianceMethod::Known
        }
    }
}

impl FromStr for VarianceMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "known" => Ok(VarianceMethod::Known),
            "weight_adjusted" | "weight-adjusted" => Ok(VarianceMethod::WeightAdjusted),
            other => Err(Error::InvalidConfig(format!(
                "unknown variance method `{other}` (expected known or weight_adjusted)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContrastResult {
    pub contrast: String,
    pub estimate: f64,
    pub se: f64,
    pub ci: [f64; 2],
    pub ci_length: f64,
    pub z: f64,
    pub p_value: f64,
    pub variance_method: VarianceMethod,
}

impl ContrastResult {
    pub fn wald(contrast: String, estimate: f64, se: f64, variance_method: VarianceMethod) -> Self {
        let half = Z_95 * se;
        let z = if se > 0.0 {
            estimate / se
        } else if estimate == 0.0 {
            0.0
        } else {
            estimate.signum() * f64::INFINITY
        };
        let normal = Normal::standard();
        let p_value = (2.0 * normal.sf(z.abs())).clamp(0.0, 1.0);
        ContrastResult {
            contrast,
            estimate,
            se,
            ci: [estimate - half, estimate + half],
            ci_length: 2.0 * half,
            z,
            p_value,
            variance_method,
        }
    }

    pub fn ci_low(&self) -> f64 {
        self.ci[0]
    }

    pub fn ci_high(&self) -> f64 {
        self.ci[1]
    }
}

fn vcov_for(fit: &GeeFit, method: VarianceMethod) -> Result<&DMatrix<f64>> {
    match method {
        VarianceMethod::Known => Ok(&fit.vcov_known),
        VarianceMethod::WeightAdjusted => fit
            .vcov_weight_adjusted
            .as_ref()
            .ok_or_else(|| Error::MissingVariance("weight_adjusted".into())),
        VarianceMethod::Robust => Err(Error::MissingVariance("robust".into())),
    }
}

pub fn estimate_contrast(fit: &GeeFit, spec: &ContrastSpec, method: VarianceMethod) -> Result<ContrastResult> {
    let t_final = *fit.occasions.last().expect("at least one occasion");
    let c = contrast_vector(spec, &fit.spec, t_final)?;
    let vcov = vcov_for(fit, method)?;
    let estimate = c.dot(&fit.theta());
    let var = (c.transpose() * vcov * &c)[0];
    Ok(ContrastResult::wald(
        spec.to_string(),
        estimate,
        var.max(0.0).sqrt(),
        method,
    ))
}

/// Labels of the four interventions, in [`AiLabel::ALL`] order.
pub const AI_NAMES: [&str; 4] = ["RCF", "RC", "RF", "R"];

/// Pairs compared by [`pairwise_table`], as indices into [`AiLabel::ALL`].
pub const PAIRWISE_ORDER: [(usize, usize); 6] = [(0, 3), (2, 3), (1, 3), (1, 2), (0, 1), (0, 2)];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairwiseRow {
    pub pair: String,
    #[serde(flatten)]
    pub result: ContrastResult,
}

/// All six differences between interventions at the final occasion.
pub fn pairwise_table(fit: &GeeFit, method: VarianceMethod) -> Result<Vec<PairwiseRow>> {
    PAIRWISE_ORDER
        .iter()
        .map(|&(a, b)| {
            let spec = ContrastSpec::difference(AiLabel::ALL[a], AiLabel::ALL[b]);
            Ok(PairwiseRow {
                pair: format!("{} vs {}", AI_NAMES[a], AI_NAMES[b]),
                result: estimate_contrast(fit, &spec, method)?,
            })
        })
        .collect()
}

/// Difference in mean final outcome between second-stage options among
/// non-responders, by inverse-probability weighted least squares on that
/// subsample with robust standard errors. `covariates` are mean-centered
/// baseline covariates added to the regression.
pub fn nonresponder_second_stage(ds: &SmartDataset, covariates: &[String]) -> Result<ContrastResult> {
    let idx: Vec<usize> = (0..ds.n()).filter(|&i| !ds.records[i].responder).collect();
    if idx.is_empty() {
        return Err(Error::InvalidDataset("no non-responders".into()));
    }
    let cov_idx = covariates
        .iter()
        .map(|c| {
            ds.covariate_index(c)
                .ok_or_else(|| Error::InvalidModel(format!("unknown covariate `{c}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let m = idx.len();
    let means: Vec<f64> = cov_idx
        .iter()
        .map(|&k| idx.iter().map(|&i| ds.records[i].x[k]).sum::<f64>() / m as f64)
        .collect();
    let p = 2 + cov_idx.len();
    let design = DMatrix::from_fn(m, p, |r, c| {
        let rec = &ds.records[idx[r]];
        match c {
            0 => 1.0,
            1 => f64::from(rec.a2.expect("non-responder")),
            _ => rec.x[cov_idx[c - 2]] - means[c - 2],
        }
    });
    let y = DVector::from_iterator(m, idx.iter().map(|&i| ds.records[i].final_outcome()));
    let p2 = ds.rand_probs.p2;
    let w = DVector::from_iterator(
        m,
        idx.iter()
            .map(|&i| 1.0 / if ds.records[i].a2 == Some(1) { p2 } else { 1.0 - p2 }),
    );
    let (coef, vcov) = wls_robust(&design, &y, &w)?;
    Ok(ContrastResult::wald(
        "second-stage|nonresponders".into(),
        2.0 * coef[1],
        2.0 * vcov[(1, 1)].max(0.0).sqrt(),
        VarianceMethod::Robust,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{RandProbs, TrialRecord};

    fn ai(a1: i8, a2: i8) -> AiLabel {
        AiLabel::new(a1, a2).unwrap()
    }

    fn vec_of(v: DVector<f64>) -> Vec<f64> {
        v.iter().copied().collect()
    }

    #[test]
    fn cross_sectional_vectors() {
        let m = MeanModelSpec::cross_sectional();
        let v = |s: ContrastSpec| vec_of(contrast_vector(&s, &m, 1).unwrap());
        assert_eq!(v(ContrastSpec::default_target()), vec![0.0, 2.0, 2.0, 0.0]);
        assert_eq!(
            v(ContrastSpec::difference(ai(1, 1), ai(1, -1))),
            vec![0.0, 0.0, 2.0, 2.0]
        );
        assert_eq!(v(ContrastSpec::FirstStageMain), vec![0.0, 2.0, 0.0, 0.0]);
        assert_eq!(v(ContrastSpec::SecondStageMain), vec![0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn cross_sectional_example_estimate() {
        let gamma = DVector::from_column_slice(&[1.0, 0.5, 0.25, 0.1]);
        let m = MeanModelSpec::cross_sectional();
        let c = contrast_vector(&ContrastSpec::default_target(), &m, 1).unwrap();
        assert!((c.dot(&gamma) - 1.5).abs() < 1e-15);
        let mean = |a: AiLabel| final_row(a, &m, 1).dot(&gamma);
        assert!((mean(ai(1, 1)) - 1.85).abs() < 1e-12);
        assert!((mean(ai(-1, -1)) - 0.35).abs() < 1e-12);
    }

    #[test]
    fn longitudinal_vector() {
        let m = MeanModelSpec::longitudinal(1);
        let c = contrast_vector(&ContrastSpec::default_target(), &m, 2).unwrap();
        assert_eq!(vec_of(c), vec![0.0, 0.0, 2.0, 0.0, 2.0, 2.0, 0.0]);
    }

    #[test]
    fn covariate_columns_cancel() {
        let m = MeanModelSpec::covariate_adjusted(vec!["a".into(), "b".into()]);
        let c = contrast_vector(&ContrastSpec::default_target(), &m, 1).unwrap();
        assert_eq!(vec_of(c), vec![0.0, 2.0, 2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn custom_length_checked() {
        let m = MeanModelSpec::cross_sectional();
        let spec = ContrastSpec::Custom { vector: vec![1.0, 2.0] };
        assert!(contrast_vector(&spec, &m, 1).is_err());
    }

    #[test]
    fn parses_cli_strings() {
        let parse = |s: &str| s.parse::<ContrastRequest>().unwrap();
        assert_eq!(
            parse("(1,1)-(-1,-1)"),
            ContrastRequest::Marginal(ContrastSpec::default_target())
        );
        assert_eq!(
            parse(" ( 1, -1 ) - ( -1, 1 ) "),
            ContrastRequest::Marginal(ContrastSpec::difference(ai(1, -1), ai(-1, 1)))
        );
        assert_eq!(
            parse("first-stage"),
            ContrastRequest::Marginal(ContrastSpec::FirstStageMain)
        );
        assert_eq!(
            parse("second-stage|nonresponders"),
            ContrastRequest::NonresponderSecondStage
        );
        assert_eq!(
            parse("[0,2,2,0]"),
            ContrastRequest::Marginal(ContrastSpec::Custom {
                vector: vec![0.0, 2.0, 2.0, 0.0]
            })
        );
        assert!("(1,1)-(2,1)".parse::<ContrastRequest>().is_err());
        assert!("banana".parse::<ContrastRequest>().is_err());
        for s in [
            "(1,1)-(-1,-1)",
            "first-stage",
            "second-stage",
            "second-stage|nonresponders",
        ] {
            assert_eq!(parse(s).to_string(), s);
        }
    }

    #[test]
    fn wald_zero_contrast() {
        let r = ContrastResult::wald("zero".into(), 0.0, 0.0, VarianceMethod::Known);
        assert_eq!((r.estimate, r.se, r.z, r.p_value), (0.0, 0.0, 0.0, 1.0));
        assert_eq!(r.ci, [0.0, 0.0]);
    }

    #[test]
    fn wald_interval() {
        let r = ContrastResult::wald("x".into(), 1.0, 0.5, VarianceMethod::Known);
        assert!((r.ci_length - 2.0 * Z_95 * 0.5).abs() < 1e-15);
        assert!((r.z - 2.0).abs() < 1e-15);
        assert!((r.p_value - 0.0455002638963584).abs() < 1e-9);
    }

    fn nonresponders(y: impl Fn(i8, usize) -> f64) -> SmartDataset {
        let mut records = vec![TrialRecord::new("r1", 1, true, None, vec![0.0], vec![0.0]).unwrap()];
        for k in 0..8 {
            let a2 = if k % 2 == 0 { 1 } else { -1 };
            let a1 = if k < 4 { 1 } else { -1 };
            records.push(
                TrialRecord::new(
                    format!("n{k}").as_str(),
                    a1,
                    false,
                    Some(a2),
                    vec![k as f64],
                    vec![y(a2, k)],
                )
                .unwrap(),
            );
        }
        SmartDataset::new(records, 1, 1, 0, vec!["age".into()], vec![], RandProbs::default()).unwrap()
    }

    #[test]
    fn nonresponder_outcome_equal_to_a2() {
        let ds = nonresponders(|a2, _| f64::from(a2));
        let r = nonresponder_second_stage(&ds, &[]).unwrap();
        assert!((r.estimate - 2.0).abs() < 1e-12);
        assert!(r.se.abs() < 1e-12);
    }

    #[test]
    fn nonresponder_difference_of_means() {
        let ys = [3.0, 1.0, 4.0, 1.5, 5.0, 9.0, 2.0, 6.0];
        let ds = nonresponders(|_, k| ys[k]);
        let r = nonresponder_second_stage(&ds, &[]).unwrap();
        let mean = |par: usize| ys.iter().skip(par).step_by(2).sum::<f64>() / 4.0;
        assert!((r.estimate - (mean(0) - mean(1))).abs() < 1e-12);
        assert!(nonresponder_second_stage(&ds, &["age".into()]).is_ok());
    }

    #[test]
    fn no_nonresponders_is_an_error() {
        let records = vec![TrialRecord::new("r", 1, true, None, vec![], vec![1.0]).unwrap()];
        let ds = SmartDataset::new(records, 1, 1, 0, vec![], vec![], RandProbs::default()).unwrap();
        assert!(nonresponder_second_stage(&ds, &[]).is_err());
    }
}
