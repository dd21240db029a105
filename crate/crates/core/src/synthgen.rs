//! Synthetic trajectories drawn from a known latent process.
//!
//! For every patient:
//!
//! ```text
//! x        ~ N(0, I_K)
//! h[0]     = β*(x) + ε,                        ε ~ N(0, Σ_ε)
//! h[t]     = tanh(gain · A h[t−1] + c) + ξ,     ξ ~ N(0, Σ_ξ) truncated at ±3 sd
//! Y[j, t]  = g*_j(h[t]) + N(0, σ²),             t = 0..T−1
//! z        ~ Bernoulli(sigmoid(w*(h[T])))
//! ```
//!
//! Ground-truth entries are uniform on `±1/√fan_in`. The transition matrix
//! is `A = ρ·I + (1 − ρ)·U` and its offset `c = (1 − ρ)·u` for uniform `U`
//! and `u`, where `ρ` is `transition_persistence`; `w*` is rescaled to norm `label_gain` and has no bias.
//! Each cell is observed with probability `p_obs` (or, under
//! informative missingness, `logistic(logit(p_obs) + slope·‖h[t]‖₂)`).
//! Random streams are derived from `(seed, patient index)`, so patients can
//! be simulated in any order.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{self, GROUND_TRUTH_TAG};
use crate::data::{Entry, TensorDataset};
use crate::error::{Error, Result};

const LABEL_ATTEMPTS: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Missingness {
    /// Every cell observed independently with probability `p_obs`.
    Mcar,
    /// Observation odds grow with the latent norm.
    Informative { slope: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub n_features: usize,
    pub n_bins: usize,
    pub n_covariates: usize,
    pub latent_dim: usize,
    /// Observation noise standard deviation σ.
    pub obs_noise_sd: f64,
    /// Diagonal of Σ_ε (variances), length `latent_dim`.
    pub init_noise_cov: Vec<f64>,
    /// Diagonal of Σ_ξ (variances), length `latent_dim`.
    pub trans_noise_cov: Vec<f64>,
    pub p_obs: f64,
    pub missingness: Missingness,
    /// Multiplies the transition matrix before the tanh. Values above one
    /// make the latent dynamics persistent.
    pub transition_gain: f64,
    /// Weight in `[0, 1]` pulling the transition matrix from a random
    /// rotation towards the identity. Higher values slow the dynamics.
    pub transition_persistence: f64,
    /// Multiplies the true classifier, sharpening the labels.
    pub label_gain: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::with_dims(2000, 10, 20, 5, 4)
    }
}

impl SynthConfig {
    /// Default noise and dynamics for the given `(N, M, T, K, D)`.
    pub fn with_dims(n: usize, m: usize, t: usize, k: usize, d: usize) -> Self {
        SynthConfig {
            n_patients: n,
            n_features: m,
            n_bins: t,
            n_covariates: k,
            latent_dim: d,
            obs_noise_sd: 0.3,
            init_noise_cov: vec![0.25; d],
            trans_noise_cov: vec![0.01; d],
            p_obs: 0.10,
            missingness: Missingness::Mcar,
            transition_gain: 1.5,
            transition_persistence: 0.85,
            label_gain: 6.0,
            seed: 0,
        }
    }

    /// All noise switched off and every cell observed.
    pub fn noise_free(mut self) -> Self {
        self.obs_noise_sd = 0.0;
        self.init_noise_cov = vec![0.0; self.latent_dim];
        self.trans_noise_cov = vec![0.0; self.latent_dim];
        self.p_obs = 1.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_patients == 0 || self.n_features == 0 || self.n_bins == 0 || self.latent_dim == 0
        {
            return bad("synthetic dimensions must be positive".into());
        }
        if !(self.obs_noise_sd >= 0.0 && self.obs_noise_sd.is_finite()) {
            return bad(format!(
                "observation noise sd must be >= 0, got {}",
                self.obs_noise_sd
            ));
        }
        for (name, cov) in [
            ("init", &self.init_noise_cov),
            ("transition", &self.trans_noise_cov),
        ] {
            if cov.len() != self.latent_dim {
                return bad(format!(
                    "{name} noise covariance has {} entries, latent dimension is {}",
                    cov.len(),
                    self.latent_dim
                ));
            }
            if cov.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return bad(format!("{name} noise covariance must be non-negative"));
            }
        }
        if !(self.p_obs > 0.0 && self.p_obs <= 1.0) {
            return bad(format!("p-obs must lie in (0, 1], got {}", self.p_obs));
        }
        if let Missingness::Informative { slope } = self.missingness {
            if !slope.is_finite() {
                return bad("informative missingness slope must be finite".into());
            }
        }
        if !(0.0..=1.0).contains(&self.transition_persistence) {
            return bad(format!(
                "transition persistence must lie in [0, 1], got {}",
                self.transition_persistence
            ));
        }
        if !(self.transition_gain.is_finite() && self.label_gain.is_finite()) {
            return bad("gains must be finite".into());
        }
        Ok(())
    }
}

/// The parameters that generated a synthetic dataset, plus its latent
/// trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// `K×D`, row per covariate.
    pub init_w: Vec<Vec<f64>>,
    pub init_b: Vec<f64>,
    /// `D×D`; `h' = tanh(gain · trans_w · h + trans_b)`, row per output.
    pub trans_w: Vec<Vec<f64>>,
    pub trans_b: Vec<f64>,
    pub transition_gain: f64,
    /// `M×D`, row per feature.
    pub dec_w: Vec<Vec<f64>>,
    pub dec_b: Vec<f64>,
    /// Label weights (already multiplied by the label gain).
    pub cls_w: Vec<f64>,
    pub cls_b: f64,
    /// `latents[i][t]` is `h*[t]` of patient `i`, `t = 0..=T`.
    pub latents: Vec<Vec<Vec<f64>>>,
}

impl GroundTruth {
    pub fn write(&self, path: &Path) -> Result<()> {
        container::write_json(path, GROUND_TRUTH_TAG, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        container::read_json(path, GROUND_TRUTH_TAG)
    }

    /// `g*(h)`.
    pub fn decode(&self, h: &[f64]) -> Vec<f64> {
        self.dec_w
            .iter()
            .zip(&self.dec_b)
            .map(|(row, b)| dot(row, h) + b)
            .collect()
    }

    /// `tanh(gain · A h + c)`.
    pub fn transition(&self, h: &[f64]) -> Vec<f64> {
        self.trans_w
            .iter()
            .zip(&self.trans_b)
            .map(|(row, c)| (self.transition_gain * dot(row, h) + c).tanh())
            .collect()
    }

    /// `β*(x)`.
    pub fn initial(&self, x: &[f64]) -> Vec<f64> {
        (0..self.init_b.len())
            .map(|d| {
                self.init_b[d]
                    + x.iter()
                        .zip(&self.init_w)
                        .map(|(xk, row)| xk * row[d])
                        .sum::<f64>()
            })
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// SplitMix64 finalizer, used to derive independent seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random stream `index` within `domain`, for a given master seed.
pub(crate) fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ mix(domain)));
    rng.set_stream(index);
    rng
}

const DOMAIN_PARAMS: u64 = 1;
const DOMAIN_PATIENT: u64 = 2;
const DOMAIN_LABEL: u64 = 3;

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Vec<Vec<f64>> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| rng.random_range(-bound..=bound))
                .collect()
        })
        .collect()
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

struct PatientSim {
    covariates: Vec<f64>,
    latents: Vec<Vec<f64>>,
    entries: Vec<(usize, usize, f64)>,
}

fn simulate_patient(cfg: &SynthConfig, gt: &GroundTruth, i: usize) -> PatientSim {
    let mut rng = stream_rng(cfg.seed, DOMAIN_PATIENT, i as u64);
    let d = cfg.latent_dim;
    let covariates: Vec<f64> = (0..cfg.n_covariates).map(|_| gaussian(&mut rng)).collect();
    let mut h = gt.initial(&covariates);
    for (hd, var) in h.iter_mut().zip(&cfg.init_noise_cov) {
        *hd += var.sqrt() * gaussian(&mut rng);
    }
    let mut latents = Vec::with_capacity(cfg.n_bins + 1);
    latents.push(h.clone());
    for _ in 0..cfg.n_bins {
        h = gt.transition(&h);
        for (hd, var) in h.iter_mut().zip(&cfg.trans_noise_cov) {
            *hd += var.sqrt() * gaussian(&mut rng).clamp(-3.0, 3.0);
        }
        latents.push(h.clone());
    }
    debug_assert_eq!(latents[0].len(), d);

    let base_logit = if cfg.p_obs >= 1.0 {
        f64::INFINITY
    } else {
        (cfg.p_obs / (1.0 - cfg.p_obs)).ln()
    };
    let mut entries = Vec::new();
    for (t, h_t) in latents.iter().take(cfg.n_bins).enumerate() {
        let p = match cfg.missingness {
            Missingness::Mcar => cfg.p_obs,
            Missingness::Informative { slope } => {
                let norm = h_t.iter().map(|v| v * v).sum::<f64>().sqrt();
                sigmoid(base_logit + slope * norm)
            }
        };
        let mean = gt.decode(h_t);
        for (j, mu) in mean.iter().enumerate() {
            // Draw both every time so the stream layout does not depend on
            // which cells end up observed.
            let noise = gaussian(&mut rng);
            let u: f64 = rng.random();
            if u < p {
                entries.push((t, j, mu + cfg.obs_noise_sd * noise));
            }
        }
    }
    PatientSim {
        covariates,
        latents,
        entries,
    }
}

fn sample_ground_truth(cfg: &SynthConfig) -> GroundTruth {
    let mut rng = stream_rng(cfg.seed, DOMAIN_PARAMS, 0);
    let (k, d, m) = (cfg.n_covariates, cfg.latent_dim, cfg.n_features);
    let init_w = uniform_matrix(&mut rng, k, d, k);
    let init_b = uniform_matrix(&mut rng, 1, d, k).remove(0);
    let a = cfg.transition_persistence;
    let mut trans_w = uniform_matrix(&mut rng, d, d, d);
    for (r, row) in trans_w.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (1.0 - a) * *v + if r == c { a } else { 0.0 };
        }
    }
    let trans_b = uniform_matrix(&mut rng, 1, d, d)
        .remove(0)
        .into_iter()
        .map(|c| (1.0 - a) * c)
        .collect();
    let dec_w = uniform_matrix(&mut rng, m, d, d);
    let dec_b = uniform_matrix(&mut rng, 1, m, d).remove(0);
    let direction = uniform_matrix(&mut rng, 1, d, d).remove(0);
    let norm = dot(&direction, &direction).sqrt().max(f64::MIN_POSITIVE);
    let cls_w: Vec<f64> = direction
        .iter()
        .map(|w| w / norm * cfg.label_gain)
        .collect();
    let cls_b = 0.0;
    GroundTruth {
        init_w,
        init_b,
        trans_w,
        trans_b,
        transition_gain: cfg.transition_gain,
        dec_w,
        dec_b,
        cls_w,
        cls_b,
        latents: Vec::new(),
    }
}

/// Simulates a dataset (without a split) and returns it with its ground
/// truth.
pub fn sample_dataset(cfg: &SynthConfig) -> Result<(TensorDataset, GroundTruth)> {
    cfg.validate()?;
    let mut gt = sample_ground_truth(cfg);
    let sims: Vec<PatientSim> = (0..cfg.n_patients)
        .into_par_iter()
        .map(|i| simulate_patient(cfg, &gt, i))
        .collect();
    gt.latents = sims.iter().map(|s| s.latents.clone()).collect();

    let scores = oracle_scores(&gt);
    let mut labels = Vec::new();
    for attempt in 0..LABEL_ATTEMPTS {
        labels = scores
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut rng = stream_rng(
                    cfg.seed,
                    DOMAIN_LABEL,
                    attempt * cfg.n_patients as u64 + i as u64,
                );
                u8::from(rng.random::<f64>() < *p)
            })
            .collect();
        let pos = labels.iter().filter(|&&z| z == 1).count();
        if pos > 0 && pos < labels.len() {
            break;
        }
        if attempt + 1 == LABEL_ATTEMPTS {
            return Err(Error::Numerical(format!(
                "labels fell into a single class in {LABEL_ATTEMPTS} attempts"
            )));
        }
    }

    let mut entries = Vec::new();
    let mut covariates = Vec::with_capacity(cfg.n_patients);
    for (i, sim) in sims.into_iter().enumerate() {
        entries.extend(
            sim.entries
                .into_iter()
                .map(|(t, j, value)| Entry { i, j, t, value }),
        );
        covariates.push(sim.covariates);
    }
    let mut ds = TensorDataset {
        n_patients: cfg.n_patients,
        n_features: cfg.n_features,
        n_bins: cfg.n_bins,
        patient_ids: (0..cfg.n_patients).map(|i| format!("p{i:06}")).collect(),
        feature_ids: (0..cfg.n_features).map(|j| format!("y{j:03}")).collect(),
        covariate_names: (0..cfg.n_covariates).map(|c| format!("x{c:03}")).collect(),
        entries,
        covariates,
        labels,
        split: None,
    };
    ds.canonicalize();
    ds.validate()?;
    Ok((ds, gt))
}

/// `sigmoid(w*(h*[T]))` for every patient: the label probability given the
/// true final latent state.
pub fn oracle_scores(gt: &GroundTruth) -> Vec<f64> {
    gt.latents
        .iter()
        .map(|traj| {
            let last = traj.last().map(Vec::as_slice).unwrap_or(&[]);
            sigmoid(dot(&gt.cls_w, last) + gt.cls_b)
        })
        .collect()
}
