//! ROC curves and AUC.
//!
//! [`roc`] integrates the tie-collapsed curve with the trapezoid rule;
//! [`auc_pairwise`] counts concordant pairs directly. Both accumulate exact
//! integer counts and divide once, so they agree to the last bit.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Split, TensorDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// From threshold `+∞` (the origin) down to the lowest score `(1, 1)`.
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocCurve {
    /// `threshold,fpr,tpr` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr);
        }
        out
    }
}

fn class_counts(scores: &[f64], labels: &[u8]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numerical(format!("score {s} is not finite")));
    }
    if let Some(z) = labels.iter().find(|&&z| z > 1) {
        return Err(Error::Config(format!("label {z} is not binary")));
    }
    let pos = labels.iter().filter(|&&z| z == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Config("AUC needs both classes present".into()));
    }
    Ok((pos, neg))
}

/// ROC curve with one point per distinct score.
pub fn roc(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    // Twice the area under the curve, in units of 1/(pos·neg).
    let mut area2: u128 = 0;
    let mut k = 0;
    while k < order.len() {
        let threshold = scores[order[k]];
        let (tp_prev, fp_prev) = (tp, fp);
        while k < order.len() && scores[order[k]] == threshold {
            if labels[order[k]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        area2 += u128::from(fp - fp_prev) * u128::from(tp + tp_prev);
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    let auc = area2 as f64 / (2 * pos as u128 * neg as u128) as f64;
    Ok(RocCurve { points, auc })
}

/// Area under the ROC curve.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    Ok(roc(scores, labels)?.auc)
}

/// Mann–Whitney estimate: the fraction of (positive, negative) pairs the
/// scores order correctly, ties counting half. Quadratic; meant as an
/// oracle.
pub fn auc_pairwise(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut twice: u128 = 0;
    for (sp, _) in scores.iter().zip(labels).filter(|(_, z)| **z == 1) {
        for (sn, _) in scores.iter().zip(labels).filter(|(_, z)| **z == 0) {
            if sp > sn {
                twice += 2;
            } else if sp == sn {
                twice += 1;
            }
        }
    }
    Ok(twice as f64 / (2 * pos as u128 * neg as u128) as f64)
}

// ---------------------------------------------------------------------------
// Reports

/// Anything that assigns probabilities to the patients of a split.
pub trait Scorer {
    fn score(&self, ds: &TensorDataset, which: Split) -> Result<Vec<f64>>;
}

/// Ordered `name,value` metrics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Metrics {
    pub values: Vec<(String, f64)>,
}

impl Metrics {
    pub fn push(&mut self, name: &str, value: f64) {
        self.values.push((name.to_string(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,value\n");
        for (n, v) in &self.values {
            let _ = writeln!(out, "{n},{v}");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("name,value") {
            return Err(Error::Container(
                "metrics CSV must start with `name,value`".into(),
            ));
        }
        let values = lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let (n, v) = l
                    .split_once(',')
                    .ok_or_else(|| Error::Container(format!("bad metrics row `{l}`")))?;
                let v: f64 = v
                    .parse()
                    .map_err(|_| Error::Container(format!("bad metric value `{v}`")))?;
                Ok((n.to_string(), v))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Metrics { values })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub metrics: Metrics,
    /// Test-split ROC curve.
    pub roc: RocCurve,
}

/// Test and validation AUC, the test ROC curve, positive rates and split
/// sizes.
pub fn report(scorer: &dyn Scorer, ds: &TensorDataset) -> Result<Report> {
    let mut metrics = Metrics::default();
    let test_idx = ds.indices(Split::Test)?;
    if test_idx.is_empty() {
        return Err(Error::Config("test split is empty".into()));
    }
    let labels_of = |idx: &[usize]| -> Vec<u8> { idx.iter().map(|&i| ds.labels[i]).collect() };

    let test_scores = scorer.score(ds, Split::Test)?;
    let curve = roc(&test_scores, &labels_of(&test_idx))?;
    metrics.push("test_auc", curve.auc);

    let val_idx = ds.indices(Split::Val)?;
    let val_auc = if val_idx.is_empty() {
        f64::NAN
    } else {
        auc(&scorer.score(ds, Split::Val)?, &labels_of(&val_idx))?
    };
    metrics.push("val_auc", val_auc);

    for which in Split::ALL {
        let idx = ds.indices(which)?;
        metrics.push(&format!("n_{which}"), idx.len() as f64);
        metrics.push(&format!("positive_rate_{which}"), ds.positive_rate(&idx));
    }
    Ok(Report {
        metrics,
        roc: curve,
    })
}
