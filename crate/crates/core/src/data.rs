//! Prototypical-SMART records, CSV ingestion, design validation and the
//! weight-and-replicate expansion.
//!
//! A unit is first randomized to `a1 ∈ {-1, 1}`. Responders (`r = 1`) stay on
//! their first-stage treatment; non-responders are randomized again to
//! `a2 ∈ {-1, 1}`. The design has six cells and embeds four adaptive
//! interventions, numbered as follows:
//!
//! | AI `(a1, a2NR)` | d | cells  |
//! |-----------------|---|--------|
//! | `(1, 1)`        | 1 | 1, 2   |
//! | `(1, -1)`       | 2 | 1, 3   |
//! | `(-1, 1)`       | 3 | 4, 5   |
//! | `(-1, -1)`      | 4 | 4, 6   |
//!
//! Outcomes are stored in wide format, one column per occasion. Occasion `0`
//! is an optional pre-randomization baseline measurement; occasions `1..=T`
//! follow the first randomization.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Contrast-coded label of an embedded adaptive intervention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AiLabel {
    a1: i8,
    a2nr: i8,
}

impl AiLabel {
    /// The four embedded interventions in `d = 1..=4` order.
    pub const ALL: [AiLabel; 4] = [
        AiLabel { a1: 1, a2nr: 1 },
        AiLabel { a1: 1, a2nr: -1 },
        AiLabel { a1: -1, a2nr: 1 },
        AiLabel { a1: -1, a2nr: -1 },
    ];

    pub fn new(a1: i8, a2nr: i8) -> Result<Self> {
        if !is_contrast_code(a1) || !is_contrast_code(a2nr) {
            return Err(Error::InvalidModel(format!(
                "adaptive intervention codes must be -1 or 1, got ({a1},{a2nr})"
            )));
        }
        Ok(AiLabel { a1, a2nr })
    }

    pub fn a1(self) -> i8 {
        self.a1
    }

    pub fn a2nr(self) -> i8 {
        self.a2nr
    }

    /// Zero-based position in [`AiLabel::ALL`].
    pub fn index(self) -> usize {
        match (self.a1, self.a2nr) {
            (1, 1) => 0,
            (1, -1) => 1,
            (-1, 1) => 2,
            _ => 3,
        }
    }

    /// The `d` label (1 to 4).
    pub fn d(self) -> usize {
        self.index() + 1
    }

    pub fn from_d(d: usize) -> Option<Self> {
        (1..=4).contains(&d).then(|| AiLabel::ALL[d - 1])
    }
}

impl fmt::Display for AiLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.a1, self.a2nr)
    }
}

impl FromStr for AiLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let inner = s
            .trim()
            .strip_prefix('(')
            .and_then(|s| s.strip_suffix(')'))
            .ok_or_else(|| Error::InvalidModel(format!("cannot parse intervention label `{s}`")))?;
        let mut parts = inner.split(',').map(|p| p.trim().parse::<i8>());
        match (parts.next(), parts.next(), parts.next()) {
            (Some(Ok(a1)), Some(Ok(a2)), None) => AiLabel::new(a1, a2),
            _ => Err(Error::InvalidModel(format!("cannot parse intervention label `{s}`"))),
        }
    }
}

fn is_contrast_code(v: i8) -> bool {
    v == 1 || v == -1
}

/// One unit's observed pathway through the trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub id: String,
    pub a1: i8,
    pub responder: bool,
    /// Second-stage assignment; present exactly for non-responders.
    pub a2: Option<i8>,
    /// Baseline covariates.
    pub x: Vec<f64>,
    /// Post-baseline auxiliary variables. Only used by assignment models.
    pub aux: Vec<f64>,
    /// Outcomes for the dataset's occasions, in time order.
    pub y: Vec<f64>,
}

impl TrialRecord {
    pub fn new(
        id: impl Into<String>,
        a1: i8,
        responder: bool,
        a2: Option<i8>,
        x: Vec<f64>,
        y: Vec<f64>,
    ) -> Result<Self> {
        let rec = TrialRecord {
            id: id.into(),
            a1,
            responder,
            a2,
            x,
            aux: Vec::new(),
            y,
        };
        rec.check()?;
        Ok(rec)
    }

    pub fn with_aux(mut self, aux: Vec<f64>) -> Self {
        self.aux = aux;
        self
    }

    fn check(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidDataset(format!("record {}: {m}", self.id)));
        if !is_contrast_code(self.a1) {
            return fail("a1 must be -1 or 1");
        }
        match (self.responder, self.a2) {
            (true, Some(_)) => return fail("responder has a second-stage assignment"),
            (false, None) => return fail("non-responder missing second-stage assignment"),
            (false, Some(a2)) if !is_contrast_code(a2) => return fail("a2 must be -1 or 1"),
            _ => {}
        }
        if self.y.iter().chain(&self.x).chain(&self.aux).any(|v| !v.is_finite()) {
            return fail("non-finite value");
        }
        Ok(())
    }

    /// Design cell (1 to 6).
    pub fn cell(&self) -> usize {
        let base = if self.a1 == 1 { 1 } else { 4 };
        match self.a2 {
            None => base,
            Some(1) => base + 1,
            Some(_) => base + 2,
        }
    }

    pub fn final_outcome(&self) -> f64 {
        *self.y.last().expect("record without outcomes")
    }
}

/// Design randomization probabilities `P(A1 = 1)` and `P(A2 = 1 | A1, R = 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandProbs {
    pub p1: f64,
    pub p2: f64,
}

impl Default for RandProbs {
    fn default() -> Self {
        RandProbs { p1: 0.5, p2: 0.5 }
    }
}

impl RandProbs {
    pub fn is_valid(&self) -> bool {
        self.p1 > 0.0 && self.p1 < 1.0 && self.p2 > 0.0 && self.p2 < 1.0
    }
}

/// A complete prototypical-SMART dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmartDataset {
    pub records: Vec<TrialRecord>,
    /// Index of the final measurement occasion.
    pub t_final: usize,
    /// Index of the first stored occasion: 0 when a baseline outcome is present, else 1.
    pub first_occasion: usize,
    /// Last occasion before the second randomization.
    pub t_star: usize,
    pub covariate_names: Vec<String>,
    pub aux_names: Vec<String>,
    pub rand_probs: RandProbs,
}

impl SmartDataset {
    pub fn new(
        records: Vec<TrialRecord>,
        t_final: usize,
        first_occasion: usize,
        t_star: usize,
        covariate_names: Vec<String>,
        aux_names: Vec<String>,
        rand_probs: RandProbs,
    ) -> Result<Self> {
        let ds = SmartDataset {
            records,
            t_final,
            first_occasion,
            t_star,
            covariate_names,
            aux_names,
            rand_probs,
        };
        ds.check()?;
        Ok(ds)
    }

    fn check(&self) -> Result<()> {
        if self.first_occasion > 1 || self.t_final < 1 {
            return Err(Error::InvalidDataset(
                "occasions must run from 0 or 1 up to T >= 1".into(),
            ));
        }
        if self.t_final >= 2 && !(1..self.t_final).contains(&self.t_star) {
            return Err(Error::InvalidDataset(format!(
                "t_star must satisfy 1 <= t_star < T (T = {}, t_star = {})",
                self.t_final, self.t_star
            )));
        }
        if !self.rand_probs.is_valid() {
            return Err(Error::InvalidDataset(
                "randomization probabilities must lie in (0, 1)".into(),
            ));
        }
        let m = self.n_occasions();
        for rec in &self.records {
            rec.check()?;
            if rec.y.len() != m || rec.x.len() != self.covariate_names.len() || rec.aux.len() != self.aux_names.len() {
                return Err(Error::InvalidDataset(format!(
                    "record {} does not match the dataset dimensions",
                    rec.id
                )));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn n_occasions(&self) -> usize {
        self.t_final + 1 - self.first_occasion
    }

    /// Occasion indices stored in each record's `y`.
    pub fn occasions(&self) -> std::ops::RangeInclusive<usize> {
        self.first_occasion..=self.t_final
    }

    pub fn n_responders(&self) -> usize {
        self.records.iter().filter(|r| r.responder).count()
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    pub fn aux_index(&self, name: &str) -> Option<usize> {
        self.aux_names.iter().position(|c| c == name)
    }

    /// Copy of the dataset keeping only the final occasion, re-indexed as `T = 1`.
    pub fn final_occasion_only(&self) -> SmartDataset {
        let mut ds = self.clone();
        for rec in &mut ds.records {
            let last = rec.final_outcome();
            rec.y = vec![last];
        }
        ds.first_occasion = 1;
        ds.t_final = 1;
        ds.t_star = 0;
        ds
    }
}

/// Options for [`load_dataset`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    pub t_star: usize,
    pub rand_probs: RandProbs,
    /// When set, the file must have outcome columns up to `y_<T>`.
    pub expected_t: Option<usize>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            t_star: 1,
            rand_probs: RandProbs::default(),
            expected_t: None,
        }
    }
}

/// Reads a wide-format CSV table: `id,a1,r,a2,x_<name>...,l_<name>...,y_<t>...`.
///
/// Outcome columns must be contiguous, starting at `y_0` or `y_1`. Missing
/// covariates or outcomes are rejected; there is no imputation.
pub fn load_dataset<R: Read>(source: R, opts: &LoadOptions) -> Result<SmartDataset> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let header = reader.headers()?.clone();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let id_col = find("id")?;
    let a1_col = find("a1")?;
    let r_col = find("r")?;
    let a2_col = find("a2")?;

    let mut covariates = Vec::new();
    let mut aux = Vec::new();
    let mut outcomes: Vec<(usize, usize)> = Vec::new();
    for (col, h) in header.iter().enumerate() {
        if let Some(name) = h.strip_prefix("x_") {
            covariates.push((col, name.to_string()));
        } else if let Some(name) = h.strip_prefix("l_") {
            aux.push((col, name.to_string()));
        } else if let Some(t) = h.strip_prefix("y_") {
            let t: usize = t
                .parse()
                .map_err(|_| Error::InvalidDataset(format!("bad outcome column `{h}`")))?;
            outcomes.push((t, col));
        }
    }
    if outcomes.is_empty() {
        return Err(Error::MissingColumn("y_<t>".into()));
    }
    outcomes.sort_unstable();
    let first = outcomes[0].0;
    let t_final = outcomes[outcomes.len() - 1].0;
    if first > 1 || outcomes.iter().enumerate().any(|(k, &(t, _))| t != first + k) {
        return Err(Error::InvalidDataset(
            "outcome columns must be contiguous y_0..y_T or y_1..y_T".into(),
        ));
    }
    if t_final == 0 {
        return Err(Error::MissingColumn("y_1".into()));
    }
    if let Some(expected) = opts.expected_t {
        if expected != t_final {
            return Err(Error::InvalidDataset(format!(
                "expected outcomes up to y_{expected}, found y_{t_final}"
            )));
        }
    }

    let mut records = Vec::new();
    for (k, row) in reader.records().enumerate() {
        let row = row?;
        let line = k + 2;
        let id = row.get(id_col).unwrap_or("").to_string();
        let field = |col: usize| row.get(col).unwrap_or("");
        let code = |col: usize, name: &str, allowed: &[i8]| -> Result<i8> {
            let raw = field(col);
            raw.parse::<i8>()
                .ok()
                .filter(|v| allowed.contains(v))
                .ok_or_else(|| Error::row(line, &id, format!("{name} = `{raw}` is not one of {allowed:?}")))
        };
        let a1 = code(a1_col, "a1", &[-1, 1])?;
        let r = code(r_col, "r", &[0, 1])?;
        let a2 = if field(a2_col).is_empty() {
            None
        } else {
            Some(code(a2_col, "a2", &[-1, 1])?)
        };
        match (r, a2) {
            (1, Some(_)) => return Err(Error::row(line, &id, "responder must have an empty a2")),
            (0, None) => return Err(Error::row(line, &id, "non-responder missing second-stage assignment")),
            _ => {}
        }
        let number = |col: usize, what: &str, name: &str| -> Result<f64> {
            let raw = field(col);
            if raw.is_empty() {
                return Err(Error::row(
                    line,
                    &id,
                    format!("missing {what} `{name}`; imputation out of scope"),
                ));
            }
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::row(line, &id, format!("non-numeric {what} `{name}` = `{raw}`")))
        };
        let x = covariates
            .iter()
            .map(|(c, n)| number(*c, "covariate", n))
            .collect::<Result<Vec<_>>>()?;
        let l = aux
            .iter()
            .map(|(c, n)| number(*c, "auxiliary variable", n))
            .collect::<Result<Vec<_>>>()?;
        let y = outcomes
            .iter()
            .map(|(t, c)| number(*c, "outcome", &format!("y_{t}")))
            .collect::<Result<Vec<_>>>()?;
        records.push(TrialRecord {
            id,
            a1,
            responder: r == 1,
            a2,
            x,
            aux: l,
            y,
        });
    }

    let t_star = if t_final >= 2 { opts.t_star } else { 0 };
    SmartDataset::new(
        records,
        t_final,
        first,
        t_star,
        covariates.into_iter().map(|(_, n)| n).collect(),
        aux.into_iter().map(|(_, n)| n).collect(),
        opts.rand_probs,
    )
}

/// Writes `ds` in the format read by [`load_dataset`].
pub fn write_dataset<W: Write>(ds: &SmartDataset, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header: Vec<String> = ["id", "a1", "r", "a2"].iter().map(|s| s.to_string()).collect();
    header.extend(ds.covariate_names.iter().map(|n| format!("x_{n}")));
    header.extend(ds.aux_names.iter().map(|n| format!("l_{n}")));
    header.extend(ds.occasions().map(|t| format!("y_{t}")));
    w.write_record(&header)?;
    for rec in &ds.records {
        let mut row = vec![
            rec.id.clone(),
            rec.a1.to_string(),
            u8::from(rec.responder).to_string(),
            rec.a2.map(|a| a.to_string()).unwrap_or_default(),
        ];
        row.extend(rec.x.iter().chain(&rec.aux).chain(&rec.y).map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Result of one validation check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Offending record ids or, for positivity, the empty design cells.
    pub offending: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
    /// Units per design cell 1 to 6.
    pub cell_counts: [usize; 6],
    /// Replicated rows per embedded intervention `d = 1..=4`.
    pub replicated_counts: [usize; 4],
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// Checks the design assumptions that can be checked from data.
pub fn validate(ds: &SmartDataset) -> ValidationReport {
    let mut cell_counts = [0usize; 6];
    let mut replicated_counts = [0usize; 4];
    for rec in &ds.records {
        if rec.a1.abs() == 1 {
            cell_counts[rec.cell() - 1] += 1;
        }
        for ai in consistent_ais(rec) {
            replicated_counts[ai.index()] += 1;
        }
    }

    let mut checks = Vec::new();
    let empty_cells: Vec<String> = cell_counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == 0)
        .map(|(k, _)| format!("cell {}", k + 1))
        .collect();
    checks.push(Check {
        name: "positivity".into(),
        passed: empty_cells.is_empty(),
        offending: empty_cells,
    });

    let collect = |bad: &dyn Fn(&TrialRecord) -> bool| -> Vec<String> {
        ds.records.iter().filter(|r| bad(r)).map(|r| r.id.clone()).collect()
    };
    let inconsistent =
        collect(&|r| r.responder == r.a2.is_some() || r.a2.is_some_and(|a| a.abs() != 1) || r.a1.abs() != 1);
    checks.push(Check {
        name: "consistency".into(),
        passed: inconsistent.is_empty(),
        offending: inconsistent,
    });
    let m = ds.n_occasions();
    let malformed = collect(&|r| {
        r.y.len() != m
            || r.x.len() != ds.covariate_names.len()
            || r.aux.len() != ds.aux_names.len()
            || r.y.iter().chain(&r.x).chain(&r.aux).any(|v| !v.is_finite())
    });
    checks.push(Check {
        name: "complete_data".into(),
        passed: malformed.is_empty(),
        offending: malformed,
    });
    let mut seen = HashSet::new();
    let dupes: Vec<String> = ds
        .records
        .iter()
        .filter(|r| !seen.insert(r.id.as_str()))
        .map(|r| r.id.clone())
        .collect();
    checks.push(Check {
        name: "unique_ids".into(),
        passed: dupes.is_empty(),
        offending: dupes,
    });
    checks.push(Check {
        name: "randomization_probabilities".into(),
        passed: ds.rand_probs.is_valid(),
        offending: Vec::new(),
    });

    ValidationReport {
        checks,
        cell_counts,
        replicated_counts,
    }
}

/// Embedded interventions whose pathway agrees with the record: both
/// interventions sharing `a1` for a responder, one for a non-responder.
pub fn consistent_ais(rec: &TrialRecord) -> Vec<AiLabel> {
    match rec.a2 {
        _ if rec.responder => vec![AiLabel { a1: rec.a1, a2nr: 1 }, AiLabel { a1: rec.a1, a2nr: -1 }],
        Some(a2) => vec![AiLabel { a1: rec.a1, a2nr: a2 }],
        None => Vec::new(),
    }
}

/// One copy of a unit per intervention it is consistent with.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicatedRow {
    pub source_index: usize,
    pub source_id: String,
    pub ai: AiLabel,
    /// Filled in by [`ReplicatedRow::with_weight`]; `None` until then.
    pub weight: Option<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl ReplicatedRow {
    pub fn with_weight(mut self, w: f64) -> Self {
        self.weight = Some(w);
        self
    }
}

/// Weight-and-replicate expansion: responders appear twice, non-responders once.
pub fn replicate(ds: &SmartDataset) -> Vec<ReplicatedRow> {
    ds.records
        .iter()
        .enumerate()
        .flat_map(|(i, rec)| {
            consistent_ais(rec).into_iter().map(move |ai| ReplicatedRow {
                source_index: i,
                source_id: rec.id.clone(),
                ai,
                weight: None,
                x: rec.x.clone(),
                y: rec.y.clone(),
            })
        })
        .collect()
}
