//! Python bindings. Results come back as plain dicts and lists.

use std::fs::File;

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use pythonize::{depythonize, pythonize};
use serde_json::{json, Value};

use smart_analysis::contrasts::{
    estimate_contrast, nonresponder_second_stage, pairwise_table, ContrastRequest, VarianceMethod,
};
use smart_analysis::data::{load_dataset, validate, write_dataset, LoadOptions, RandProbs, SmartDataset};
use smart_analysis::estimator::ipw_cell_means;
use smart_analysis::simulator::{run_study, SimConfig};
use smart_analysis::technique::{fit_technique, Technique, TechniqueFit, TechniqueOptions};
use smart_analysis::weights::known_weights;
use smart_analysis::Error;

fn to_py_err(e: Error) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn to_py<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    Ok(pythonize(py, v)?)
}

/// A trial dataset loaded from CSV.
#[pyclass(frozen, module = "smartpy")]
pub struct Dataset {
    inner: SmartDataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    #[pyo3(signature = (path, t_star = 1, p1 = 0.5, p2 = 0.5))]
    fn from_csv(path: &str, t_star: usize, p1: f64, p2: f64) -> PyResult<Self> {
        let file = File::open(path).map_err(|e| PyValueError::new_err(format!("cannot open {path}: {e}")))?;
        let opts = LoadOptions {
            t_star,
            rand_probs: RandProbs { p1, p2 },
            expected_t: None,
        };
        let inner = load_dataset(file, &opts).map_err(to_py_err)?;
        Ok(Dataset { inner })
    }

    fn to_csv(&self, path: &str) -> PyResult<()> {
        let file = File::create(path).map_err(|e| PyValueError::new_err(format!("cannot create {path}: {e}")))?;
        write_dataset(&self.inner, file).map_err(to_py_err)
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn t_final(&self) -> usize {
        self.inner.t_final
    }

    #[getter]
    fn covariates(&self) -> Vec<String> {
        self.inner.covariate_names.clone()
    }

    /// Design-assumption checks and cell counts.
    fn validate<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let report = validate(&self.inner);
        to_py(
            py,
            &json!({
                "passed": report.passed(),
                "checks": report.checks,
                "cell_counts": report.cell_counts,
                "replicated_counts": report.replicated_counts,
            }),
        )
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n={}, T={})", self.inner.n(), self.inner.t_final)
    }
}

struct Fitted {
    fit: TechniqueFit,
    method: VarianceMethod,
}

#[allow(clippy::too_many_arguments)]
fn fit(
    ds: &Dataset,
    technique: &str,
    covariates: Option<Vec<String>>,
    k1: Option<Vec<String>>,
    k2: Option<Vec<String>>,
    variance: Option<&str>,
    ai_specific_variance: bool,
    small_sample_correction: bool,
) -> PyResult<Fitted> {
    let technique: Technique = technique.parse().map_err(to_py_err)?;
    let opts = TechniqueOptions {
        covariates,
        k1: k1.unwrap_or_default(),
        k2: k2.unwrap_or_default(),
        t_star: None,
        ai_specific_variance,
        small_sample_correction,
    };
    let fit = fit_technique(&ds.inner, technique, &opts).map_err(to_py_err)?;
    let method = match variance {
        Some(v) => v.parse().map_err(to_py_err)?,
        None => VarianceMethod::default_for(&fit.fit),
    };
    Ok(Fitted { fit, method })
}

fn fit_summary(tf: &TechniqueFit) -> Value {
    let f = &tf.fit;
    let coefficients: serde_json::Map<String, Value> = f
        .coefficient_names
        .iter()
        .zip(f.gamma.iter().chain(&f.beta))
        .map(|(k, v)| (k.clone(), json!(v)))
        .collect();
    json!({
        "coefficients": coefficients,
        "sigma": f.working.sigma,
        "rho": f.working.rho,
        "rho_projected": f.rho_projected,
        "iterations": f.iterations,
        "converged": f.converged,
        "weights": tf.weights.kind,
    })
}

/// Fit one technique and estimate the requested contrasts.
#[pyfunction]
#[pyo3(signature = (
    dataset, technique, contrasts = None, *, covariates = None, k1 = None, k2 = None,
    variance = None, ai_specific_variance = false, small_sample_correction = false
))]
#[allow(clippy::too_many_arguments)]
fn analyze<'py>(
    py: Python<'py>,
    dataset: &Dataset,
    technique: &str,
    contrasts: Option<Vec<String>>,
    covariates: Option<Vec<String>>,
    k1: Option<Vec<String>>,
    k2: Option<Vec<String>>,
    variance: Option<&str>,
    ai_specific_variance: bool,
    small_sample_correction: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let f = fit(
        dataset,
        technique,
        covariates,
        k1,
        k2,
        variance,
        ai_specific_variance,
        small_sample_correction,
    )?;
    let requests = contrasts.unwrap_or_else(|| vec!["(1,1)-(-1,-1)".into()]);
    let mut results = Vec::with_capacity(requests.len());
    for text in &requests {
        let r = match text.parse::<ContrastRequest>().map_err(to_py_err)? {
            ContrastRequest::Marginal(spec) => estimate_contrast(&f.fit.fit, &spec, f.method),
            ContrastRequest::NonresponderSecondStage => {
                nonresponder_second_stage(&dataset.inner, &f.fit.fit.spec.covariates)
            }
        }
        .map_err(to_py_err)?;
        results.push(r);
    }
    to_py(
        py,
        &json!({
            "technique": f.fit.technique,
            "n": dataset.inner.n(),
            "fit": fit_summary(&f.fit),
            "contrasts": results,
        }),
    )
}

/// The six pairwise comparisons of the embedded interventions.
#[pyfunction]
#[pyo3(signature = (dataset, technique, *, covariates = None, k1 = None, k2 = None, variance = None))]
fn pairwise<'py>(
    py: Python<'py>,
    dataset: &Dataset,
    technique: &str,
    covariates: Option<Vec<String>>,
    k1: Option<Vec<String>>,
    k2: Option<Vec<String>>,
    variance: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let f = fit(dataset, technique, covariates, k1, k2, variance, false, false)?;
    let rows = pairwise_table(&f.fit.fit, f.method).map_err(to_py_err)?;
    to_py(py, &rows)
}

/// Known-weight means of the final outcome per intervention and their covariance.
#[pyfunction]
fn cell_means<'py>(py: Python<'py>, dataset: &Dataset) -> PyResult<Bound<'py, PyAny>> {
    let cm = ipw_cell_means(&dataset.inner, &known_weights(&dataset.inner)).map_err(to_py_err)?;
    to_py(py, &cm)
}

/// Run a simulation study. `config` takes the same keys as a study config file
/// with scalar `rho` and `nu`; keyword arguments override it.
#[pyfunction]
#[pyo3(signature = (config = None, *, jobs = None, **overrides))]
fn simulate<'py>(
    py: Python<'py>,
    config: Option<&Bound<'py, PyDict>>,
    jobs: Option<usize>,
    overrides: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyAny>> {
    let merged = PyDict::new(py);
    for source in [config, overrides].into_iter().flatten() {
        merged.update(source.as_mapping())?;
    }
    let cfg: SimConfig = depythonize(merged.as_any())?;
    let result = py.detach(|| run_study(&cfg, jobs)).map_err(to_py_err)?;
    to_py(py, &result)
}

#[pymodule]
fn smartpy(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(pairwise, m)?)?;
    m.add_function(wrap_pyfunction!(cell_means, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
