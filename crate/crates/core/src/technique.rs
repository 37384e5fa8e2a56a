//! The analysis techniques: each pairs a mean model, a weighting scheme and a
//! working covariance.
//!
//! | id           | mean model                 | weights   | working covariance      |
//! |--------------|----------------------------|-----------|-------------------------|
//! | `t0`         | final outcome              | known     | independence            |
//! | `t1`         | final outcome + covariates | known     | independence            |
//! | `t2e`        | final outcome              | empirical | independence            |
//! | `t2m`        | final outcome              | modeled   | independence            |
//! | `t3`         | trajectory                 | known     | exchangeable            |
//! | `t4`         | trajectory                 | known     | exchangeable, per-time σ |
//! | `ensemble_e` | trajectory + covariates    | empirical | exchangeable, per-time σ |
//! | `ensemble_m` | trajectory + covariates    | modeled   | exchangeable, per-time σ |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SmartDataset;
use crate::error::{Error, Result};
use crate::estimator::{solve_estimating_equation, CovarianceKind, FitOptions, GeeFit, MeanModelSpec};
use crate::weights::{known_weights, modeled_weights, WeightFit, WeightKind, WeightModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Technique {
    T0,
    T1,
    T2e,
    T2m,
    T3,
    T4,
    EnsembleE,
    EnsembleM,
}

impl Technique {
    pub const ALL: [Technique; 8] = [
        Technique::T0,
        Technique::T1,
        Technique::T2e,
        Technique::T2m,
        Technique::T3,
        Technique::T4,
        Technique::EnsembleE,
        Technique::EnsembleM,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Technique::T0 => "t0",
            Technique::T1 => "t1",
            Technique::T2e => "t2e",
            Technique::T2m => "t2m",
            Technique::T3 => "t3",
            Technique::T4 => "t4",
            Technique::EnsembleE => "ensemble_e",
            Technique::EnsembleM => "ensemble_m",
        }
    }

    pub fn is_longitudinal(self) -> bool {
        matches!(
            self,
            Technique::T3 | Technique::T4 | Technique::EnsembleE | Technique::EnsembleM
        )
    }

    pub fn uses_covariates(self) -> bool {
        matches!(self, Technique::T1 | Technique::EnsembleE | Technique::EnsembleM)
    }

    pub fn weight_kind(self) -> WeightKind {
        match self {
            Technique::T2e | Technique::EnsembleE => WeightKind::Empirical,
            Technique::T2m | Technique::EnsembleM => WeightKind::Modeled,
            _ => WeightKind::Known,
        }
    }

    pub fn working(self) -> CovarianceKind {
        match self {
            Technique::T0 | Technique::T1 | Technique::T2e | Technique::T2m => CovarianceKind::Independence,
            Technique::T3 => CovarianceKind::ExchHomogeneous,
            _ => CovarianceKind::ExchHeterogeneous,
        }
    }

    pub fn valid_ids() -> String {
        Technique::ALL.map(Technique::id).join(", ")
    }
}

impl fmt::Display for Technique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Technique {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Technique::ALL.into_iter().find(|t| t.id() == s.trim()).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "unknown technique `{s}`; valid ids are {}",
                Technique::valid_ids()
            ))
        })
    }
}

/// Settings shared by all techniques; each technique uses the parts it needs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TechniqueOptions {
    /// Covariates for the covariate-adjusted models; all dataset covariates when unset.
    #[serde(default)]
    pub covariates: Option<Vec<String>>,
    /// Stage-1 assignment-model regressors for modeled weights.
    #[serde(default)]
    pub k1: Vec<String>,
    /// Stage-2 assignment-model regressors for modeled weights.
    #[serde(default)]
    pub k2: Vec<String>,
    /// Knot of the trajectory model; the dataset's value when unset.
    #[serde(default)]
    pub t_star: Option<usize>,
    #[serde(default)]
    pub ai_specific_variance: bool,
    #[serde(default)]
    pub small_sample_correction: bool,
}

impl TechniqueOptions {
    pub fn mean_model(&self, technique: Technique, ds: &SmartDataset) -> MeanModelSpec {
        let base = if technique.is_longitudinal() {
            MeanModelSpec::longitudinal(self.t_star.unwrap_or(ds.t_star))
        } else {
            MeanModelSpec::cross_sectional()
        };
        if technique.uses_covariates() {
            base.with_covariates(self.covariates.clone().unwrap_or_else(|| ds.covariate_names.clone()))
        } else {
            base
        }
    }

    pub fn weight_model(&self, technique: Technique) -> WeightModel {
        match technique.weight_kind() {
            WeightKind::Known => WeightModel::known(),
            WeightKind::Empirical => WeightModel::empirical(),
            WeightKind::Modeled => WeightModel::modeled(self.k1.clone(), self.k2.clone()),
        }
    }

    pub fn fit_options(&self, technique: Technique) -> FitOptions {
        FitOptions {
            working: technique.working(),
            ai_specific_variance: self.ai_specific_variance && !technique.is_longitudinal(),
            small_sample_correction: self.small_sample_correction,
            ..FitOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TechniqueFit {
    pub technique: Technique,
    pub weights: WeightFit,
    pub fit: GeeFit,
}

pub fn fit_weights(ds: &SmartDataset, model: &WeightModel) -> Result<WeightFit> {
    match model.kind {
        WeightKind::Known => Ok(known_weights(ds)),
        _ => modeled_weights(ds, model),
    }
}

pub fn fit_technique(ds: &SmartDataset, technique: Technique, opts: &TechniqueOptions) -> Result<TechniqueFit> {
    let spec = opts.mean_model(technique, ds);
    spec.check(ds)?;
    let weights = fit_weights(ds, &opts.weight_model(technique))?;
    let fit = solve_estimating_equation(ds, &weights, &spec, &opts.fit_options(technique))?;
    Ok(TechniqueFit {
        technique,
        weights,
        fit,
    })
}
