//! Performance-ranked ensembles.
//!
//! Many generative models are trained with `gamma` and `lambda` drawn from
//! priors; the `top_k` by validation AUC are kept and their predicted
//! probabilities averaged.

use std::fmt::Write as _;
use std::path::Path;

use log::info;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{self, ENSEMBLE_TAG};
use crate::data::{Split, TensorDataset};
use crate::error::{Error, Result};
use crate::eval::{self, Scorer};
use crate::model::{self, Architecture, HyperParams, TrainedModel};
use crate::synthgen::stream_rng;

const DOMAIN_HPARAMS: u64 = 11;

/// Base of the logarithm in the `lambda` prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    #[default]
    Natural,
    Ten,
}

impl LogBase {
    fn exp(self, u: f64) -> f64 {
        match self {
            LogBase::Natural => u.exp(),
            LogBase::Ten => 10f64.powf(u),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub n_models: usize,
    pub top_k: usize,
    /// `gamma ~ Uniform(lo, hi)`.
    pub gamma_range: (f64, f64),
    /// `log(lambda) ~ Uniform(lo, hi)`.
    pub log_lambda_range: (f64, f64),
    pub log_base: LogBase,
    /// Every field except `gamma`, `lambda` and `seed` is copied into each
    /// member.
    pub template: HyperParams,
    pub master_seed: u64,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        EnsembleSpec {
            n_models: 200,
            top_k: 20,
            gamma_range: (0.0, 0.1),
            log_lambda_range: (-8.0, -2.0),
            log_base: LogBase::Natural,
            template: HyperParams::default(),
            master_seed: 0,
        }
    }
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.n_models {
            return Err(Error::Config(format!(
                "top-k must lie in 1..={}, got {}",
                self.n_models, self.top_k
            )));
        }
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ordered(self.gamma_range) || !ordered(self.log_lambda_range) {
            return Err(Error::Config(
                "prior bounds must be finite and ordered".into(),
            ));
        }
        if self.gamma_range.0 < 0.0 || self.gamma_range.1 > 1.0 {
            return Err(Error::Config("gamma prior must lie within [0, 1]".into()));
        }
        self.template.validate()
    }
}

/// Draws the hyperparameters of member `model_index`.
pub fn sample_hparams(spec: &EnsembleSpec, model_index: usize) -> Result<HyperParams> {
    if model_index >= spec.n_models {
        return Err(Error::Config(format!(
            "model index {model_index} out of range for {} models",
            spec.n_models
        )));
    }
    let mut rng = stream_rng(spec.master_seed, DOMAIN_HPARAMS, model_index as u64);
    let uniform = |rng: &mut rand_chacha::ChaCha8Rng, (lo, hi): (f64, f64)| -> f64 {
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..=hi)
        }
    };
    let gamma = uniform(&mut rng, spec.gamma_range);
    let lambda = spec.log_base.exp(uniform(&mut rng, spec.log_lambda_range));
    let seed = rng.random();
    Ok(HyperParams {
        gamma,
        lambda,
        seed,
        ..spec.template.clone()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemberStatus {
    Ok,
    Failed(String),
}

/// One trained (or failed) member of the candidate pool.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub index: usize,
    pub hparams: HyperParams,
    pub model: Option<TrainedModel>,
    pub status: MemberStatus,
}

impl PoolEntry {
    /// Validation AUC, or −1 for failed members.
    pub fn val_auc(&self) -> f64 {
        self.model.as_ref().map_or(-1.0, |m| m.val_auc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub model_index: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub seed: u64,
    pub val_auc: f64,
    pub selected: bool,
    pub status: String,
}

pub const SELECTION_HEADER: &str = "model_index,gamma,lambda,seed,val_auc,selected,status";

pub fn selection_csv(rows: &[SelectionRow]) -> String {
    let mut out = format!("{SELECTION_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.model_index,
            r.gamma,
            r.lambda,
            r.seed,
            r.val_auc,
            u8::from(r.selected),
            r.status
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    /// Selected members, best validation AUC first.
    pub members: Vec<TrainedModel>,
    pub member_indices: Vec<usize>,
    /// One row per candidate, in model-index order.
    pub report: Vec<SelectionRow>,
}

impl EnsembleModel {
    pub fn write(&self, path: &Path) -> Result<()> {
        container::write_json(path, ENSEMBLE_TAG, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        container::read_json(path, ENSEMBLE_TAG)
    }

    /// Mean validation AUC of the selected members.
    pub fn mean_member_val_auc(&self) -> f64 {
        self.members.iter().map(|m| m.val_auc).sum::<f64>() / self.members.len() as f64
    }
}

impl Scorer for EnsembleModel {
    fn score(&self, ds: &TensorDataset, which: Split) -> Result<Vec<f64>> {
        ensemble_predict(self, ds, which)
    }
}

/// Trains every candidate on a pool of `workers` threads. Results are in
/// model-index order and do not depend on scheduling.
pub fn train_pool(
    ds: &TensorDataset,
    spec: &EnsembleSpec,
    workers: usize,
) -> Result<Vec<PoolEntry>> {
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let hparams = (0..spec.n_models)
        .map(|i| sample_hparams(spec, i))
        .collect::<Result<Vec<_>>>()?;
    // Numerical failures exclude a member; anything else aborts the run.
    pool.install(|| {
        hparams
            .into_par_iter()
            .enumerate()
            .map(
                |(index, hp)| match model::train(ds, &hp, Architecture::Generative) {
                    Ok(m) => {
                        info!("model {index}: val AUC {:.4}", m.val_auc);
                        Ok(PoolEntry {
                            index,
                            hparams: hp,
                            model: Some(m),
                            status: MemberStatus::Ok,
                        })
                    }
                    Err(Error::Numerical(msg)) => {
                        info!("model {index} failed: {msg}");
                        Ok(PoolEntry {
                            index,
                            hparams: hp,
                            model: None,
                            status: MemberStatus::Failed(msg),
                        })
                    }
                    Err(e) => Err(e),
                },
            )
            .collect::<Result<Vec<_>>>()
    })
}

/// Successful pool entries ordered by descending validation AUC, ties
/// broken by smaller model index.
pub fn rank(pool: &[PoolEntry]) -> Vec<&PoolEntry> {
    let mut ok: Vec<&PoolEntry> = pool.iter().filter(|e| e.model.is_some()).collect();
    ok.sort_by(|a, b| {
        b.val_auc()
            .total_cmp(&a.val_auc())
            .then(a.index.cmp(&b.index))
    });
    ok
}

/// Keeps the `top_k` best members of `pool`.
pub fn select(pool: &[PoolEntry], top_k: usize) -> Result<EnsembleModel> {
    let ranked = rank(pool);
    if top_k == 0 || ranked.len() < top_k {
        return Err(Error::Numerical(format!(
            "{} of {} models trained successfully, {top_k} required",
            ranked.len(),
            pool.len()
        )));
    }
    let chosen = &ranked[..top_k];
    let mut entries: Vec<&PoolEntry> = pool.iter().collect();
    entries.sort_by_key(|e| e.index);
    let report = entries
        .iter()
        .map(|e| SelectionRow {
            model_index: e.index,
            gamma: e.hparams.gamma,
            lambda: e.hparams.lambda,
            seed: e.hparams.seed,
            val_auc: e.val_auc(),
            selected: chosen.iter().any(|c| c.index == e.index),
            status: match &e.status {
                MemberStatus::Ok => "ok".into(),
                MemberStatus::Failed(_) => "failed".into(),
            },
        })
        .collect();
    Ok(EnsembleModel {
        members: chosen.iter().filter_map(|e| e.model.clone()).collect(),
        member_indices: chosen.iter().map(|e| e.index).collect(),
        report,
    })
}

#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub ensemble: EnsembleModel,
    pub pool: Vec<PoolEntry>,
}

/// Trains the candidate pool and selects the ensemble.
pub fn run_ensemble(
    ds: &TensorDataset,
    spec: &EnsembleSpec,
    workers: usize,
) -> Result<EnsembleRun> {
    let pool = train_pool(ds, spec, workers)?;
    let ensemble = select(&pool, spec.top_k)?;
    Ok(EnsembleRun { ensemble, pool })
}

fn average(predictions: &[Vec<f64>]) -> Vec<f64> {
    let n = predictions.first().map_or(0, Vec::len);
    let k = predictions.len() as f64;
    (0..n)
        .map(|i| predictions.iter().map(|p| p[i]).sum::<f64>() / k)
        .collect()
}

/// Unweighted mean of the members' probabilities.
pub fn ensemble_predict(em: &EnsembleModel, ds: &TensorDataset, which: Split) -> Result<Vec<f64>> {
    if em.members.is_empty() {
        return Err(Error::Config("ensemble has no members".into()));
    }
    let preds = em
        .members
        .iter()
        .map(|m| model::predict(m, ds, which))
        .collect::<Result<Vec<_>>>()?;
    Ok(average(&preds))
}

/// Test AUC of the top-`k` ensemble for each requested `k`.
pub fn ensemble_curve(
    pool: &[PoolEntry],
    ds: &TensorDataset,
    ks: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let ranked = rank(pool);
    let max_k = ks.iter().copied().max().unwrap_or(0);
    if max_k > ranked.len() || ks.contains(&0) {
        return Err(Error::Config(format!(
            "ensemble sizes must lie in 1..={}",
            ranked.len()
        )));
    }
    let test_idx = ds.indices(Split::Test)?;
    let labels: Vec<u8> = test_idx.iter().map(|&i| ds.labels[i]).collect();
    let preds = ranked[..max_k]
        .iter()
        .filter_map(|e| e.model.as_ref())
        .map(|m| model::predict_indices(m, ds, &test_idx))
        .collect::<Result<Vec<_>>>()?;
    ks.iter()
        .map(|&k| Ok((k, eval::auc(&average(&preds[..k]), &labels)?)))
        .collect()
}

pub fn curve_csv(curve: &[(usize, f64)]) -> String {
    let mut out = String::from("k,test_auc\n");
    for (k, auc) in curve {
        let _ = writeln!(out, "{k},{auc}");
    }
    out
}
