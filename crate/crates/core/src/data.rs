//! Long-format ingestion, time binning and the sparse trajectory tensor.
//!
//! A [`TensorDataset`] stores only the observed cells of the
//! patients × features × bins tensor; the observation mask is implied by
//! which cells are present.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, DATASET_TAG};
use crate::error::{Error, Result};

pub const RECORDS_HEADER: [&str; 4] = ["patient_id", "feature_id", "time_hours", "value"];
pub const LABELS_HEADER: [&str; 2] = ["patient_id", "label"];

/// One timestamped measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct LongRecord {
    pub patient_id: String,
    pub feature_id: String,
    /// Hours since the patient's reference time.
    pub time: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinningSpec {
    pub bin_width: f64,
    pub horizon_bins: usize,
    /// Features not listed here are averaged.
    pub aggregators: BTreeMap<String, Aggregator>,
}

impl Default for BinningSpec {
    fn default() -> Self {
        BinningSpec {
            bin_width: 1.0,
            horizon_bins: 48,
            aggregators: BTreeMap::new(),
        }
    }
}

impl BinningSpec {
    pub fn new(bin_width: f64, horizon_bins: usize) -> Self {
        BinningSpec {
            bin_width,
            horizon_bins,
            aggregators: BTreeMap::new(),
        }
    }

    pub fn with_aggregator(mut self, feature: &str, agg: Aggregator) -> Self {
        self.aggregators.insert(feature.to_string(), agg);
        self
    }

    pub fn aggregator(&self, feature: &str) -> Aggregator {
        self.aggregators.get(feature).copied().unwrap_or_default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bin_width.is_finite() && self.bin_width > 0.0) {
            return Err(Error::Config(format!(
                "bin width must be positive and finite, got {}",
                self.bin_width
            )));
        }
        if self.horizon_bins == 0 {
            return Err(Error::Config("horizon must be at least one bin".into()));
        }
        Ok(())
    }
}

/// Static covariates keyed by patient, in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CovariateTable {
    pub names: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

/// Binary labels keyed by patient, in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabelTable {
    pub rows: Vec<(String, u8)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// An observed tensor cell `(patient, feature, bin) -> value`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub i: usize,
    pub j: usize,
    pub t: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDataset {
    pub n_patients: usize,
    pub n_features: usize,
    pub n_bins: usize,
    pub patient_ids: Vec<String>,
    pub feature_ids: Vec<String>,
    pub covariate_names: Vec<String>,
    /// Observed cells, unique per `(i, j, t)`.
    pub entries: Vec<Entry>,
    /// Dense `n_patients × n_covariates`.
    pub covariates: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    pub split: Option<Vec<Split>>,
}

impl TensorDataset {
    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    /// Checks every structural invariant of the container.
    pub fn validate(&self) -> Result<()> {
        let (n, m, t) = (self.n_patients, self.n_features, self.n_bins);
        if n == 0 || m == 0 || t == 0 {
            return Err(Error::Integrity(format!(
                "dataset dimensions must be positive, got {n}×{m}×{t}"
            )));
        }
        if self.patient_ids.len() != n || self.feature_ids.len() != m {
            return Err(Error::Integrity(
                "index maps disagree with dimensions".into(),
            ));
        }
        if self.labels.len() != n || self.covariates.len() != n {
            return Err(Error::Integrity(
                "labels or covariates do not cover every patient".into(),
            ));
        }
        if let Some(label) = self.labels.iter().find(|&&z| z > 1) {
            return Err(Error::Integrity(format!("label {label} is not binary")));
        }
        let k = self.n_covariates();
        for (i, row) in self.covariates.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Integrity(format!(
                    "patient {} has {} covariates, expected {k}",
                    self.patient_ids[i],
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Integrity(format!(
                    "patient {} has a non-finite covariate",
                    self.patient_ids[i]
                )));
            }
        }
        if self.entries.is_empty() {
            return Err(Error::Integrity("dataset has no observed cells".into()));
        }
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if e.i >= n || e.j >= m || e.t >= t {
                return Err(Error::Integrity(format!(
                    "entry ({}, {}, {}) out of range for {n}×{m}×{t}",
                    e.i, e.j, e.t
                )));
            }
            if !e.value.is_finite() {
                return Err(Error::Integrity(format!(
                    "entry ({}, {}, {}) is not finite",
                    e.i, e.j, e.t
                )));
            }
            if !seen.insert((e.i, e.j, e.t)) {
                return Err(Error::Integrity(format!(
                    "duplicate entry ({}, {}, {})",
                    e.i, e.j, e.t
                )));
            }
        }
        if let Some(split) = &self.split {
            if split.len() != n {
                return Err(Error::Integrity(
                    "split does not cover every patient".into(),
                ));
            }
        }
        Ok(())
    }

    /// Patient indices assigned to `which`, ascending.
    pub fn indices(&self, which: Split) -> Result<Vec<usize>> {
        let split = self
            .split
            .as_ref()
            .ok_or_else(|| Error::Config("dataset has no split assignment".into()))?;
        Ok(split
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == which)
            .map(|(i, _)| i)
            .collect())
    }

    /// Entries grouped by patient: `out[i]` lists the entries of patient `i`.
    pub fn entries_by_patient(&self) -> Vec<Vec<Entry>> {
        let mut out = vec![Vec::new(); self.n_patients];
        for e in &self.entries {
            out[e.i].push(*e);
        }
        out
    }

    /// Sorts entries into canonical `(i, j, t)` order.
    pub fn canonicalize(&mut self) {
        self.entries.sort_by_key(|e| (e.i, e.j, e.t));
    }

    pub fn positive_rate(&self, idx: &[usize]) -> f64 {
        if idx.is_empty() {
            return 0.0;
        }
        idx.iter().filter(|&&i| self.labels[i] == 1).count() as f64 / idx.len() as f64
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        container::write_json(path, DATASET_TAG, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let ds: TensorDataset = container::read_json(path, DATASET_TAG)?;
        ds.validate()?;
        Ok(ds)
    }
}

/// Fraction of tensor cells that are observed.
pub fn fill_rate(ds: &TensorDataset) -> f64 {
    ds.entries.len() as f64 / (ds.n_patients * ds.n_features * ds.n_bins) as f64
}

// ---------------------------------------------------------------------------
// Ingestion

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(path, 0, e.to_string()))
}

fn read_header(path: &Path, rdr: &mut csv::Reader<std::fs::File>) -> Result<Vec<String>> {
    let header = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?;
    Ok(header.iter().map(str::to_string).collect())
}

fn check_header(path: &Path, found: &[String], expected: &[&str]) -> Result<()> {
    if found.len() != expected.len() || found.iter().zip(expected).any(|(a, b)| a != b) {
        return Err(parse_err(
            path,
            1,
            format!(
                "expected header `{}`, found `{}`",
                expected.join(","),
                found.join(",")
            ),
        ));
    }
    Ok(())
}

fn parse_real(path: &Path, line: u64, field: &str, raw: &str) -> Result<f64> {
    let v: f64 = raw
        .parse()
        .map_err(|_| parse_err(path, line, format!("{field}: `{raw}` is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(
            path,
            line,
            format!("{field}: `{raw}` is not finite"),
        ));
    }
    Ok(v)
}

fn read_records(path: &Path) -> Result<Vec<LongRecord>> {
    let mut rdr = open_csv(path)?;
    let header = read_header(path, &mut rdr)?;
    check_header(path, &header, &RECORDS_HEADER)?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(path, line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let time = parse_real(path, line, "time_hours", &row[2])?;
        if time < 0.0 {
            return Err(parse_err(
                path,
                line,
                format!("time_hours {time} is negative"),
            ));
        }
        let value = parse_real(path, line, "value", &row[3])?;
        if row[0].is_empty() || row[1].is_empty() {
            return Err(parse_err(path, line, "empty patient_id or feature_id"));
        }
        out.push(LongRecord {
            patient_id: row[0].to_string(),
            feature_id: row[1].to_string(),
            time,
            value,
        });
    }
    Ok(out)
}

fn read_covariates(path: &Path) -> Result<CovariateTable> {
    let mut rdr = open_csv(path)?;
    let header = read_header(path, &mut rdr)?;
    if header.first().map(String::as_str) != Some("patient_id") {
        return Err(parse_err(path, 1, "first column must be `patient_id`"));
    }
    let names = header[1..].to_vec();
    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(path, line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let id = row[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(parse_err(path, line, format!("duplicate patient `{id}`")));
        }
        let values = names
            .iter()
            .enumerate()
            .map(|(c, name)| parse_real(path, line, name, &row[c + 1]))
            .collect::<Result<Vec<_>>>()?;
        rows.push((id, values));
    }
    Ok(CovariateTable { names, rows })
}

fn read_labels(path: &Path) -> Result<LabelTable> {
    let mut rdr = open_csv(path)?;
    let header = read_header(path, &mut rdr)?;
    check_header(path, &header, &LABELS_HEADER)?;
    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(path, line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let label = match &row[1] {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(parse_err(
                    path,
                    line,
                    format!("label `{other}` is not 0 or 1"),
                ))
            }
        };
        let id = row[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(parse_err(path, line, format!("duplicate patient `{id}`")));
        }
        rows.push((id, label));
    }
    Ok(LabelTable { rows })
}

/// Reads the three input tables and reconciles their patient sets.
///
/// The labels file defines the patient universe: a patient that appears in
/// the records or covariates but has no label is an integrity error, as is
/// a labeled patient without a covariate row.
pub fn ingest_long_csv(
    records_path: &Path,
    covariates_path: &Path,
    labels_path: &Path,
) -> Result<(Vec<LongRecord>, CovariateTable, LabelTable)> {
    let records = read_records(records_path)?;
    let covariates = read_covariates(covariates_path)?;
    let labels = read_labels(labels_path)?;

    let labeled: BTreeSet<&str> = labels.rows.iter().map(|(p, _)| p.as_str()).collect();
    if let Some(r) = records
        .iter()
        .find(|r| !labeled.contains(r.patient_id.as_str()))
    {
        return Err(Error::Integrity(format!(
            "patient `{}` has records but no label",
            r.patient_id
        )));
    }
    if let Some((p, _)) = covariates
        .rows
        .iter()
        .find(|(p, _)| !labeled.contains(p.as_str()))
    {
        return Err(Error::Integrity(format!(
            "patient `{p}` has covariates but no label"
        )));
    }
    let with_cov: BTreeSet<&str> = covariates.rows.iter().map(|(p, _)| p.as_str()).collect();
    if let Some((p, _)) = labels
        .rows
        .iter()
        .find(|(p, _)| !with_cov.contains(p.as_str()))
    {
        return Err(Error::Integrity(format!(
            "patient `{p}` has no covariate row"
        )));
    }
    Ok((records, covariates, labels))
}

// ---------------------------------------------------------------------------
// Tensorization

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TensorizeReport {
    /// Records whose bin index fell at or beyond the horizon.
    pub dropped_beyond_horizon: usize,
    /// Records folded into a cell that already had a value.
    pub merged: usize,
}

/// Bins records into the sparse tensor.
///
/// Patients are indexed in label-table order and features in lexicographic
/// order of their identifiers, so the result does not depend on record
/// order.
pub fn tensorize(
    records: &[LongRecord],
    covariates: &CovariateTable,
    labels: &LabelTable,
    spec: &BinningSpec,
) -> Result<(TensorDataset, TensorizeReport)> {
    spec.validate()?;
    if records.is_empty() {
        return Err(Error::Integrity("no records to tensorize".into()));
    }

    let patient_ids: Vec<String> = labels.rows.iter().map(|(p, _)| p.clone()).collect();
    let patient_index: HashMap<&str, usize> = patient_ids
        .iter()
        .enumerate()
        .map(|(i, p)| (p.as_str(), i))
        .collect();
    let feature_ids: Vec<String> = records
        .iter()
        .map(|r| r.feature_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let feature_index: HashMap<&str, usize> = feature_ids
        .iter()
        .enumerate()
        .map(|(j, f)| (f.as_str(), j))
        .collect();

    let mut report = TensorizeReport::default();
    let mut cells: BTreeMap<(usize, usize, usize), Vec<f64>> = BTreeMap::new();
    for r in records {
        if !(r.time.is_finite() && r.time >= 0.0 && r.value.is_finite()) {
            return Err(Error::Integrity(format!(
                "record for `{}`/`{}` has invalid time or value",
                r.patient_id, r.feature_id
            )));
        }
        let i = *patient_index.get(r.patient_id.as_str()).ok_or_else(|| {
            Error::Integrity(format!(
                "patient `{}` has records but no label",
                r.patient_id
            ))
        })?;
        let j = feature_index[r.feature_id.as_str()];
        let bin = (r.time / spec.bin_width).floor();
        if bin >= spec.horizon_bins as f64 {
            report.dropped_beyond_horizon += 1;
            continue;
        }
        cells.entry((i, j, bin as usize)).or_default().push(r.value);
    }

    let mut entries = Vec::with_capacity(cells.len());
    for ((i, j, t), mut values) in cells {
        report.merged += values.len() - 1;
        // Fixed summation order keeps the result independent of record order.
        values.sort_by(f64::total_cmp);
        let sum: f64 = values.iter().sum();
        let value = match spec.aggregator(&feature_ids[j]) {
            Aggregator::Sum => sum,
            Aggregator::Mean => sum / values.len() as f64,
        };
        entries.push(Entry { i, j, t, value });
    }

    let cov_by_patient: HashMap<&str, &Vec<f64>> = covariates
        .rows
        .iter()
        .map(|(p, v)| (p.as_str(), v))
        .collect();
    let covs = patient_ids
        .iter()
        .map(|p| {
            cov_by_patient
                .get(p.as_str())
                .map(|v| (*v).clone())
                .ok_or_else(|| Error::Integrity(format!("patient `{p}` has no covariate row")))
        })
        .collect::<Result<Vec<_>>>()?;

    let ds = TensorDataset {
        n_patients: patient_ids.len(),
        n_features: feature_ids.len(),
        n_bins: spec.horizon_bins,
        covariate_names: covariates.names.clone(),
        entries,
        covariates: covs,
        labels: labels.rows.iter().map(|(_, z)| *z).collect(),
        patient_ids,
        feature_ids,
        split: None,
    };
    ds.validate()?;
    Ok((ds, report))
}

// ---------------------------------------------------------------------------
// Normalization

/// Per-feature and per-covariate standardization constants from the
/// training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub covariate_mean: Vec<f64>,
    pub covariate_std: Vec<f64>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 1.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std.is_finite() && std > 1e-12 {
        (mean, std)
    } else {
        (mean, 1.0)
    }
}

impl NormStats {
    /// Population mean and standard deviation over observed training cells.
    pub fn from_train(ds: &TensorDataset) -> Result<Self> {
        let train = ds.indices(Split::Train)?;
        let mut is_train = vec![false; ds.n_patients];
        for &i in &train {
            is_train[i] = true;
        }
        let mut per_feature = vec![Vec::new(); ds.n_features];
        for e in ds.entries.iter().filter(|e| is_train[e.i]) {
            per_feature[e.j].push(e.value);
        }
        let (feature_mean, feature_std) = per_feature.iter().map(|v| mean_std(v)).unzip();
        let (covariate_mean, covariate_std) = (0..ds.n_covariates())
            .map(|c| {
                let col: Vec<f64> = train.iter().map(|&i| ds.covariates[i][c]).collect();
                mean_std(&col)
            })
            .unzip();
        Ok(NormStats {
            feature_mean,
            feature_std,
            covariate_mean,
            covariate_std,
        })
    }

    /// Stats that leave every value unchanged.
    pub fn identity(n_features: usize, n_covariates: usize) -> Self {
        NormStats {
            feature_mean: vec![0.0; n_features],
            feature_std: vec![1.0; n_features],
            covariate_mean: vec![0.0; n_covariates],
            covariate_std: vec![1.0; n_covariates],
        }
    }
}

/// Z-scores observed values and covariate columns. Labels and the mask are
/// untouched.
pub fn normalize(ds: &TensorDataset, stats: &NormStats) -> Result<TensorDataset> {
    if stats.feature_mean.len() != ds.n_features || stats.feature_std.len() != ds.n_features {
        return Err(Error::Config(format!(
            "normalization stats cover {} features, dataset has {}",
            stats.feature_mean.len(),
            ds.n_features
        )));
    }
    if stats.covariate_mean.len() != ds.n_covariates()
        || stats.covariate_std.len() != ds.n_covariates()
    {
        return Err(Error::Config(format!(
            "normalization stats cover {} covariates, dataset has {}",
            stats.covariate_mean.len(),
            ds.n_covariates()
        )));
    }
    let mut out = ds.clone();
    for e in &mut out.entries {
        e.value = (e.value - stats.feature_mean[e.j]) / stats.feature_std[e.j];
    }
    for row in &mut out.covariates {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (*v - stats.covariate_mean[c]) / stats.covariate_std[c];
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Splitting

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Self {
        SplitFractions { train, val, test }
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.as_array();
        if f.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::Config(format!(
                "split fractions must all be positive, got {f:?}"
            )));
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must sum to 1, got {f:?}"
            )));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `n` items over `fractions`.
fn apportion(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let raw = fractions.map(|f| f * n as f64);
    let mut counts = raw.map(|r| r.floor() as usize);
    let assigned: usize = counts.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = raw[a] - raw[a].floor();
        let rb = raw[b] - raw[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &s in order.iter().take(n.saturating_sub(assigned)) {
        counts[s] += 1;
    }
    counts
}

/// Label-stratified train/val/test assignment, deterministic in `seed`.
pub fn split(ds: &TensorDataset, fractions: SplitFractions, seed: u64) -> Result<TensorDataset> {
    fractions.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![Split::Train; ds.n_patients];
    for class in [0u8, 1u8] {
        let mut members: Vec<usize> = (0..ds.n_patients)
            .filter(|&i| ds.labels[i] == class)
            .collect();
        members.shuffle(&mut rng);
        let counts = apportion(members.len(), fractions.as_array());
        let mut cursor = 0;
        for (which, count) in Split::ALL.into_iter().zip(counts) {
            for &i in &members[cursor..cursor + count] {
                assignment[i] = which;
            }
            cursor += count;
        }
    }
    for which in Split::ALL {
        if !assignment.contains(&which) {
            return Err(Error::Config(format!(
                "split `{which}` received no patients"
            )));
        }
    }
    let mut out = ds.clone();
    out.split = Some(assignment);
    Ok(out)
}
