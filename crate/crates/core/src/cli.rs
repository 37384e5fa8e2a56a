//! The `smart` command-line interface.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::contrasts::{
    estimate_contrast, nonresponder_second_stage, pairwise_table, ContrastRequest, ContrastResult, VarianceMethod,
};
use crate::data::{load_dataset, validate, LoadOptions, RandProbs, SmartDataset, ValidationReport};
use crate::error::{Error, Result};
use crate::simulator::{run_study, Design, SimConfig, SimResult};
use crate::technique::{fit_technique, Technique, TechniqueFit, TechniqueOptions};

#[derive(Debug, Parser)]
#[command(
    name = "smart",
    version,
    about = "Estimate and compare the adaptive interventions embedded in a SMART"
)]
pub struct Cli {
    /// Output format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Write results to this file instead of standard output.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Random seed (simulate).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (simulate); defaults to all available.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Table,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a data file against the design assumptions.
    Validate(DataArgs),
    /// Fit one technique and estimate contrasts.
    Analyze(AnalyzeArgs),
    /// All six pairwise comparisons of the embedded interventions.
    Pairwise(ModelArgs),
    /// Run a Monte Carlo study.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// CSV file with one row per unit.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Last occasion before the second randomization.
    #[arg(long)]
    pub t_star: Option<usize>,
    /// First-stage randomization probability of a1 = 1.
    #[arg(long)]
    pub p1: Option<f64>,
    /// Second-stage randomization probability of a2 = 1.
    #[arg(long)]
    pub p2: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// TOML file with analysis settings; command-line flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Technique id: t0, t1, t2e, t2m, t3, t4, ensemble_e or ensemble_m.
    #[arg(long)]
    pub technique: Option<String>,
    /// Covariates for the covariate-adjusted techniques (default: all).
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    /// Stage-1 assignment-model regressors for modeled weights.
    #[arg(long, value_delimiter = ',')]
    pub k1: Option<Vec<String>>,
    /// Stage-2 assignment-model regressors for modeled weights.
    #[arg(long, value_delimiter = ',')]
    pub k2: Option<Vec<String>>,
    /// Variance estimator: known or weight_adjusted (default depends on the weights).
    #[arg(long)]
    pub variance: Option<String>,
    /// Separate residual variance per intervention (final-outcome techniques).
    #[arg(long)]
    pub ai_specific_variance: bool,
    /// Inflate covariances by n / (n - p).
    #[arg(long)]
    pub small_sample_correction: bool,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Contrast: "(1,1)-(-1,-1)", first-stage, second-stage, "second-stage|nonresponders"
    /// or a coefficient vector. Repeatable.
    #[arg(long)]
    pub contrast: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// TOML file with study settings; command-line flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Design preset: proto or asic_like.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Within-person correlation; a comma list runs one cell per value.
    #[arg(long, value_delimiter = ',')]
    pub rho: Option<Vec<f64>>,
    /// Covariate-outcome correlation; a comma list runs one cell per value.
    #[arg(long, value_delimiter = ',')]
    pub nu: Option<Vec<f64>>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub techniques: Option<Vec<String>>,
    #[arg(long)]
    pub contrast: Option<String>,
    /// Write per-replication estimates to this CSV (one file per cell when several).
    #[arg(long)]
    pub per_rep: Option<PathBuf>,
}

/// Analysis settings, as read from a config file and resolved with flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub data: Option<PathBuf>,
    pub technique: Option<String>,
    pub contrasts: Vec<String>,
    pub covariates: Option<Vec<String>>,
    pub k1: Option<Vec<String>>,
    pub k2: Option<Vec<String>>,
    pub t_star: Option<usize>,
    pub p1: Option<f64>,
    pub p2: Option<f64>,
    pub variance: Option<String>,
    pub ai_specific_variance: bool,
    pub small_sample_correction: bool,
}

/// Runs the CLI and maps failures to exit codes: 2 for input problems, 3 for numerical ones.
pub fn main_with(cli: Cli) -> ExitCode {
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Report(text)) => {
            eprintln!("{text}");
            ExitCode::from(2)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

enum Failure {
    /// Validation failed; the text is the report.
    Report(String),
    Error(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn config_error(msg: impl Into<String>) -> Failure {
    Failure::Error(Error::InvalidConfig(msg.into()))
}

fn run(cli: &Cli) -> std::result::Result<(), Failure> {
    let rendered = match &cli.command {
        Command::Validate(args) => cmd_validate(args, cli.format)?,
        Command::Analyze(args) => cmd_analyze(args, cli.format)?,
        Command::Pairwise(args) => cmd_pairwise(args, cli.format)?,
        Command::Simulate(args) => cmd_simulate(args, cli)?,
    };
    emit(cli.output.as_deref(), &rendered).map_err(|e| Failure::Error(e.into()))
}

fn emit(path: Option<&Path>, text: &str) -> io::Result<()> {
    match path {
        Some(p) => {
            let mut f = BufWriter::new(File::create(p)?);
            f.write_all(text.as_bytes())?;
            f.flush()
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            lock.write_all(text.as_bytes())?;
            lock.flush()
        }
    }
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> std::result::Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Error(e.into()))?;
    toml::from_str(&text).map_err(|e| config_error(format!("{}: {}", path.display(), e.to_string().trim_end())))
}

fn load(args: &DataArgs) -> std::result::Result<(SmartDataset, PathBuf), Failure> {
    let path = args
        .data
        .clone()
        .ok_or_else(|| config_error("missing required option --data"))?;
    let defaults = RandProbs::default();
    let opts = LoadOptions {
        t_star: args.t_star.unwrap_or(1),
        rand_probs: RandProbs {
            p1: args.p1.unwrap_or(defaults.p1),
            p2: args.p2.unwrap_or(defaults.p2),
        },
        expected_t: None,
    };
    let file = File::open(&path).map_err(|e| config_error(format!("cannot open {}: {e}", path.display())))?;
    Ok((load_dataset(file, &opts)?, path))
}

fn validation_json(report: &ValidationReport) -> Value {
    json!({
        "passed": report.passed(),
        "checks": report.checks,
        "cell_counts": report.cell_counts,
        "replicated_counts": report.replicated_counts,
    })
}

fn validation_text(report: &ValidationReport) -> String {
    let mut out = String::from("validation failed:\n");
    for c in report.failures() {
        out.push_str(&format!("  {}: {}\n", c.name, c.offending.join(", ")));
    }
    out
}

fn cmd_validate(args: &DataArgs, format: Format) -> std::result::Result<String, Failure> {
    let (ds, path) = load(args)?;
    let report = validate(&ds);
    if !report.passed() {
        return Err(Failure::Report(validation_text(&report)));
    }
    let cfg = json!({ "data": path, "t_star": ds.t_star, "p1": ds.rand_probs.p1, "p2": ds.rand_probs.p2 });
    Ok(match format {
        Format::Json => to_json(&json!({ "config": cfg, "n": ds.n(), "validation": validation_json(&report) })),
        Format::Csv | Format::Table => {
            let rows: Vec<Vec<String>> = report
                .checks
                .iter()
                .map(|c| vec![c.name.clone(), if c.passed { "pass" } else { "fail" }.into()])
                .collect();
            render(format, &cfg, &["check", "status"], &rows)
        }
    })
}

fn resolve_analysis(args: &ModelArgs, contrasts: &[String]) -> std::result::Result<AnalysisConfig, Failure> {
    let mut cfg: AnalysisConfig = match &args.config {
        Some(p) => read_toml(p)?,
        None => AnalysisConfig::default(),
    };
    let d = &args.data;
    if d.data.is_some() {
        cfg.data = d.data.clone();
    }
    cfg.t_star = d.t_star.or(cfg.t_star);
    cfg.p1 = d.p1.or(cfg.p1);
    cfg.p2 = d.p2.or(cfg.p2);
    cfg.technique = args.technique.clone().or(cfg.technique);
    cfg.covariates = args.covariates.clone().or(cfg.covariates);
    cfg.k1 = args.k1.clone().or(cfg.k1);
    cfg.k2 = args.k2.clone().or(cfg.k2);
    cfg.variance = args.variance.clone().or(cfg.variance);
    cfg.ai_specific_variance |= args.ai_specific_variance;
    cfg.small_sample_correction |= args.small_sample_correction;
    if !contrasts.is_empty() {
        cfg.contrasts = contrasts.to_vec();
    }
    if cfg.contrasts.is_empty() {
        cfg.contrasts = vec!["(1,1)-(-1,-1)".into()];
    }
    Ok(cfg)
}

struct Prepared {
    cfg: AnalysisConfig,
    ds: SmartDataset,
    report: ValidationReport,
    fitted: TechniqueFit,
    method: Option<VarianceMethod>,
}

fn prepare(args: &ModelArgs, contrasts: &[String]) -> std::result::Result<Prepared, Failure> {
    let mut cfg = resolve_analysis(args, contrasts)?;
    let technique: Technique = cfg
        .technique
        .as_deref()
        .ok_or_else(|| {
            config_error(format!(
                "missing required option --technique (valid ids are {})",
                Technique::valid_ids()
            ))
        })?
        .parse()?;
    if technique.weight_kind() == crate::weights::WeightKind::Modeled {
        for (name, value) in [("--k1", &cfg.k1), ("--k2", &cfg.k2)] {
            if value.is_none() {
                return Err(config_error(format!(
                    "technique {technique} needs assignment-model regressors; missing option {name}"
                )));
            }
        }
    }
    let data_args = DataArgs {
        data: cfg.data.clone(),
        t_star: cfg.t_star,
        p1: cfg.p1,
        p2: cfg.p2,
    };
    let (ds, _) = load(&data_args)?;
    cfg.t_star = Some(ds.t_star);
    cfg.p1 = Some(ds.rand_probs.p1);
    cfg.p2 = Some(ds.rand_probs.p2);
    let report = validate(&ds);
    if !report.passed() {
        return Err(Failure::Report(validation_text(&report)));
    }
    if technique.is_longitudinal() && ds.t_final < 2 {
        return Err(Error::InvalidModel("longitudinal technique requires T ≥ 2".into()).into());
    }
    let opts = TechniqueOptions {
        covariates: cfg.covariates.clone(),
        k1: cfg.k1.clone().unwrap_or_default(),
        k2: cfg.k2.clone().unwrap_or_default(),
        t_star: None,
        ai_specific_variance: cfg.ai_specific_variance,
        small_sample_correction: cfg.small_sample_correction,
    };
    if technique.uses_covariates() && cfg.covariates.is_none() {
        cfg.covariates = Some(ds.covariate_names.clone());
    }
    let method = cfg.variance.as_deref().map(str::parse::<VarianceMethod>).transpose()?;
    let fitted = fit_technique(&ds, technique, &opts)?;
    let method_used = method.unwrap_or_else(|| VarianceMethod::default_for(&fitted.fit));
    cfg.variance = Some(
        match method_used {
            VarianceMethod::Known => "known",
            VarianceMethod::WeightAdjusted => "weight_adjusted",
            VarianceMethod::Robust => "robust",
        }
        .into(),
    );
    cfg.technique = Some(technique.id().into());
    Ok(Prepared {
        cfg,
        ds,
        report,
        fitted,
        method: Some(method_used),
    })
}

fn fit_json(tf: &TechniqueFit) -> Value {
    let fit = &tf.fit;
    let coefficients: serde_json::Map<String, Value> = fit
        .coefficient_names
        .iter()
        .zip(fit.gamma.iter().chain(&fit.beta))
        .map(|(k, v)| (k.clone(), json!(v)))
        .collect();
    json!({
        "coefficients": coefficients,
        "sigma": fit.working.sigma,
        "rho": fit.working.rho,
        "rho_projected": fit.rho_projected,
        "ai_sigma": fit.ai_sigma,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "weights": tf.weights.kind,
        "extreme_weight_warning": tf.weights.extreme_weight_warning,
    })
}

const CONTRAST_COLUMNS: [&str; 8] = [
    "contrast",
    "estimate",
    "se",
    "ci_low",
    "ci_high",
    "ci_length",
    "z",
    "p_value",
];

fn contrast_row(label: &str, r: &ContrastResult) -> Vec<String> {
    let mut row = vec![label.to_string()];
    row.extend(
        [r.estimate, r.se, r.ci[0], r.ci[1], r.ci_length, r.z, r.p_value]
            .iter()
            .map(|v| fmt_num(*v)),
    );
    row
}

fn cmd_analyze(args: &AnalyzeArgs, format: Format) -> std::result::Result<String, Failure> {
    let requests = args
        .contrast
        .iter()
        .map(|c| c.parse::<ContrastRequest>())
        .collect::<Result<Vec<_>>>()?;
    let p = prepare(&args.model, &args.contrast)?;
    let method = p.method.expect("resolved");
    let requests = if requests.is_empty() {
        p.cfg
            .contrasts
            .iter()
            .map(|c| c.parse::<ContrastRequest>())
            .collect::<Result<Vec<_>>>()?
    } else {
        requests
    };
    if p.fitted.weights.extreme_weight_warning {
        eprintln!("warning: some weights exceed 1e6");
    }
    if p.fitted.fit.rho_projected {
        eprintln!("warning: the estimated correlation was projected into its valid range");
    }
    let results = requests
        .iter()
        .map(|req| match req {
            ContrastRequest::Marginal(spec) => estimate_contrast(&p.fitted.fit, spec, method),
            ContrastRequest::NonresponderSecondStage => {
                nonresponder_second_stage(&p.ds, p.fitted.fit.spec.covariates.as_slice())
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let cfg = serde_json::to_value(&p.cfg).expect("serializable");
    Ok(match format {
        Format::Json => to_json(&json!({
            "config": cfg,
            "technique": p.fitted.technique,
            "n": p.ds.n(),
            "validation": validation_json(&p.report),
            "fit": fit_json(&p.fitted),
            "contrasts": results,
        })),
        _ => {
            let rows: Vec<Vec<String>> = results.iter().map(|r| contrast_row(&r.contrast, r)).collect();
            render(format, &cfg, &CONTRAST_COLUMNS, &rows)
        }
    })
}

fn cmd_pairwise(args: &ModelArgs, format: Format) -> std::result::Result<String, Failure> {
    let p = prepare(args, &[])?;
    let mut cfg = p.cfg.clone();
    cfg.contrasts.clear();
    let rows = pairwise_table(&p.fitted.fit, p.method.expect("resolved"))?;
    let cfg = serde_json::to_value(&cfg).expect("serializable");
    Ok(match format {
        Format::Json => to_json(&json!({
            "config": cfg,
            "technique": p.fitted.technique,
            "n": p.ds.n(),
            "pairs": rows,
        })),
        _ => {
            let mut columns = vec!["pair"];
            columns.extend(CONTRAST_COLUMNS);
            let table: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    let mut row = vec![r.pair.clone()];
                    row.extend(contrast_row(&r.result.contrast, &r.result));
                    row
                })
                .collect();
            render(format, &cfg, &columns, &table)
        }
    })
}

/// Values of a grid axis (`rho` or `nu`) given in a study config file.
pub type Grid = Option<Vec<f64>>;

/// A study config file: [`SimConfig`] fields, with `rho` and `nu` allowed to be lists.
pub fn parse_study_config(text: &str) -> Result<(SimConfig, Grid, Grid)> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut grid = |key: &str| -> Result<Option<Vec<f64>>> {
        let number = |v: &toml::Value| {
            v.as_float()
                .or_else(|| v.as_integer().map(|i| i as f64))
                .ok_or_else(|| Error::InvalidConfig(format!("`{key}` must be a number or a list of numbers")))
        };
        match table.remove(key) {
            None => Ok(None),
            Some(toml::Value::Array(items)) => Ok(Some(items.iter().map(number).collect::<Result<_>>()?)),
            Some(v) => Ok(Some(vec![number(&v)?])),
        }
    };
    let rho = grid("rho")?;
    let nu = grid("nu")?;
    let cfg: SimConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
    Ok((cfg, rho, nu))
}

fn cmd_simulate(args: &SimulateArgs, cli: &Cli) -> std::result::Result<String, Failure> {
    let (mut base, file_rho, file_nu) = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::Error(e.into()))?;
            parse_study_config(&text).map_err(|e| match e {
                Error::InvalidConfig(msg) => config_error(format!("{}: {}", path.display(), msg.trim_end())),
                other => Failure::Error(other),
            })?
        }
        None => (SimConfig::default(), None, None),
    };
    if let Some(p) = &args.preset {
        base.design = p.parse::<Design>()?;
    }
    if let Some(n) = args.n {
        base.n = n;
    }
    if let Some(r) = args.reps {
        base.reps = r;
    }
    if let Some(d) = args.delta {
        base.delta = d;
    }
    if let Some(s) = cli.seed {
        base.seed = s;
    }
    if let Some(ts) = &args.techniques {
        base.techniques = ts.iter().map(|t| t.parse()).collect::<Result<_>>()?;
    }
    if let Some(c) = &args.contrast {
        base.contrast = match c.parse::<ContrastRequest>()? {
            ContrastRequest::Marginal(spec) => spec,
            ContrastRequest::NonresponderSecondStage => {
                return Err(config_error("the non-responder contrast cannot be a simulation target"))
            }
        };
    }
    base.keep_reps = base.keep_reps || args.per_rep.is_some();
    base.techniques = base.technique_list();
    let rhos = args.rho.clone().or(file_rho).unwrap_or_else(|| vec![base.rho]);
    let nus = args.nu.clone().or(file_nu).unwrap_or_else(|| vec![base.nu]);
    let cells: Vec<SimConfig> = rhos
        .iter()
        .flat_map(|&rho| nus.iter().map(move |&nu| (rho, nu)))
        .map(|(rho, nu)| SimConfig {
            rho,
            nu,
            ..base.clone()
        })
        .collect();
    for c in &cells {
        c.check()?;
    }
    let jobs = cli
        .jobs
        .or_else(|| std::thread::available_parallelism().ok().map(|n| n.get()));

    let mut results: Vec<SimResult> = Vec::with_capacity(cells.len());
    for c in &cells {
        let r = run_study(c, jobs)?;
        if r.reps_excluded > 0 {
            eprintln!(
                "rho = {}, nu = {}: {} of {} replications excluded after fit failures",
                c.rho, c.nu, r.reps_excluded, c.reps
            );
        }
        results.push(r);
    }

    if let Some(path) = &args.per_rep {
        for r in &results {
            let target = if results.len() == 1 {
                path.clone()
            } else {
                cell_path(path, r.config.rho, r.config.nu)
            };
            write_per_rep(&target, r).map_err(Failure::Error)?;
        }
    }

    let mut resolved = serde_json::to_value(&base).expect("serializable");
    resolved["rho"] = json!(rhos);
    resolved["nu"] = json!(nus);
    resolved["jobs"] = json!(jobs);
    Ok(match cli.format {
        Format::Json => {
            let cells: Vec<Value> = results
                .iter()
                .map(|r| {
                    let mut v = serde_json::to_value(r).expect("serializable");
                    let obj = v.as_object_mut().expect("object");
                    obj.remove("config");
                    obj.remove("per_rep");
                    obj.insert("rho".into(), json!(r.config.rho));
                    obj.insert("nu".into(), json!(r.config.nu));
                    v
                })
                .collect();
            to_json(&json!({ "config": resolved, "cells": cells }))
        }
        format => {
            let techniques = base.technique_list();
            let mut columns: Vec<String> = vec!["rho".into(), "nu".into(), "reps_used".into()];
            for t in techniques.iter().skip(1) {
                columns.push(format!("re_{t}"));
                columns.push(format!("closer_{t}"));
            }
            let rows: Vec<Vec<String>> = results
                .iter()
                .map(|r| {
                    let mut row = vec![
                        r.config.rho.to_string(),
                        r.config.nu.to_string(),
                        r.reps_used.to_string(),
                    ];
                    for s in r.techniques.iter().skip(1) {
                        row.push(format!("{:.3}", s.relative_efficiency));
                        row.push(format!("{:.1}", s.pct_closer.unwrap_or(f64::NAN)));
                    }
                    row
                })
                .collect();
            let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
            render(format, &resolved, &cols, &rows)
        }
    })
}

fn cell_path(path: &Path, rho: f64, nu: f64) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("reps");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    path.with_file_name(format!("{stem}_rho{rho}_nu{nu}.{ext}"))
}

fn write_per_rep(path: &Path, r: &SimResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["rep", "technique", "estimate", "se", "covered"])?;
    for rec in r.per_rep.iter().flatten() {
        w.write_record([
            rec.rep.to_string(),
            rec.technique.id().to_string(),
            rec.estimate.to_string(),
            rec.se.to_string(),
            rec.covered.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn to_json(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        v.to_string()
    }
}

fn render(format: Format, cfg: &Value, columns: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = format!("# config: {cfg}\n");
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(columns).expect("in-memory write");
            for row in rows {
                w.write_record(row).expect("in-memory write");
            }
            out.push_str(&String::from_utf8(w.into_inner().expect("flush")).expect("utf-8"));
        }
        _ => {
            let widths: Vec<usize> = (0..columns.len())
                .map(|c| {
                    rows.iter()
                        .map(|r| r[c].chars().count())
                        .chain([columns[c].len()])
                        .max()
                        .unwrap_or(0)
                })
                .collect();
            let line = |cells: Vec<&str>| -> String {
                let parts: Vec<String> = cells
                    .iter()
                    .zip(&widths)
                    .enumerate()
                    .map(
                        |(k, (c, w))| {
                            if k == 0 {
                                format!("{c:<w$}")
                            } else {
                                format!("{c:>w$}")
                            }
                        },
                    )
                    .collect();
                parts.join("  ").trim_end().to_string() + "\n"
            };
            out.push_str(&line(columns.to_vec()));
            for row in rows {
                out.push_str(&line(row.iter().map(String::as_str).collect()));
            }
        }
    }
    out
}
