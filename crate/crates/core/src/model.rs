//! The generative GRU classifier and the mean-imputed GRU baseline.
//!
//! Both networks start from `h[0] = tanh(β(x))` on the static covariates and
//! unroll a GRU over the time bins. The generative network decodes every
//! hidden state through `g`: the decoded value of the current state fills
//! missing inputs, and the decoded value of the next state is the
//! reconstruction of the current bin. The baseline instead sees
//! mean-imputed values, the mask and the time since each feature was last
//! observed, and is trained on the labels alone.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::{debug, warn};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, MODEL_TAG};
use crate::data::{self, Entry, NormStats, Split, TensorDataset};
use crate::error::{Error, Result};
use crate::eval;
use crate::ndiff::{self, Adam, Matrix, ParamStore, ParamVars, Tape, Var};

const BETA_W: &str = "beta_w";
const BETA_B: &str = "beta_b";
const DEC_W: &str = "dec_w";
const DEC_B: &str = "dec_b";
const CLS_W: &str = "cls_w";
const CLS_B: &str = "cls_b";
const GRU_W: [&str; 3] = ["gru_wz", "gru_wr", "gru_wh"];
const GRU_U: [&str; 3] = ["gru_uz", "gru_ur", "gru_uh"];
const GRU_B: [&str; 3] = ["gru_bz", "gru_br", "gru_bh"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Generative,
    Baseline,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Generative => "generative",
            Architecture::Baseline => "baseline",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generative" => Ok(Architecture::Generative),
            "baseline" => Ok(Architecture::Baseline),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Weight of the reconstruction term; `1 − gamma` weighs cross-entropy.
    pub gamma: f64,
    /// L2 penalty on all weight matrices (biases excluded).
    pub lambda: f64,
    pub latent_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            gamma: 0.05,
            lambda: (-5.0f64).exp(),
            latent_dim: 32,
            learning_rate: 1e-3,
            epochs: 40,
            batch_size: 64,
            grad_clip_norm: Some(5.0),
            seed: 0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.latent_dim == 0 {
            return bad("latent dimension must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be at least 1".into());
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("gradient clip norm must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parameters

/// Trainable weights plus the dimensions they were built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: Architecture,
    pub n_covariates: usize,
    pub n_features: usize,
    pub latent_dim: usize,
    pub store: ParamStore,
}

impl ModelParams {
    /// Width of the GRU input vector.
    pub fn input_dim(&self) -> usize {
        input_dim(self.arch, self.n_features)
    }

    /// Uniform `±1/√fan_in` initialization.
    pub fn init(arch: Architecture, k: usize, m: usize, d: usize, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| -> Matrix {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
        };
        let inp = input_dim(arch, m);
        store.insert(BETA_W, uniform(k, d, k));
        store.insert(BETA_B, uniform(1, d, k));
        for ((w, u), b) in GRU_W.iter().zip(GRU_U).zip(GRU_B) {
            store.insert(w, uniform(inp, d, inp + d));
            store.insert(u, uniform(d, d, inp + d));
            store.insert(b, uniform(1, d, inp + d));
        }
        if arch == Architecture::Generative {
            store.insert(DEC_W, uniform(d, m, d));
            store.insert(DEC_B, uniform(1, m, d));
        }
        store.insert(CLS_W, uniform(d, 1, d));
        store.insert(CLS_B, uniform(1, 1, d));
        ModelParams {
            arch,
            n_covariates: k,
            n_features: m,
            latent_dim: d,
            store,
        }
    }

    /// Same shapes, every entry zero.
    pub fn zeros(arch: Architecture, k: usize, m: usize, d: usize) -> Self {
        let mut p = Self::init(arch, k, m, d, &mut ChaCha8Rng::seed_from_u64(0));
        p.store = p.store.zeros_like();
        p
    }

    /// Names of the matrices that count as weights for the L2 penalty.
    pub fn weight_names(&self) -> Vec<&'static str> {
        let mut names = vec![BETA_W, CLS_W];
        names.extend(GRU_W);
        names.extend(GRU_U);
        if self.arch == Architecture::Generative {
            names.push(DEC_W);
        }
        names
    }

    /// Names of the decoder matrices (empty for the baseline).
    pub fn decoder_names(&self) -> Vec<&'static str> {
        match self.arch {
            Architecture::Generative => vec![DEC_W, DEC_B],
            Architecture::Baseline => vec![],
        }
    }

    /// `Σ‖W‖²` over [`Self::weight_names`].
    pub fn weight_penalty(&self) -> f64 {
        self.weight_names()
            .iter()
            .filter_map(|n| self.store.get(n))
            .map(|m| m.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let (k, m, d) = (self.n_covariates, self.n_features, self.latent_dim);
        let inp = self.input_dim();
        let mut expected = vec![
            (BETA_W, (k, d)),
            (BETA_B, (1, d)),
            (CLS_W, (d, 1)),
            (CLS_B, (1, 1)),
        ];
        for ((w, u), b) in GRU_W.iter().zip(GRU_U).zip(GRU_B) {
            expected.push((w, (inp, d)));
            expected.push((u, (d, d)));
            expected.push((b, (1, d)));
        }
        if self.arch == Architecture::Generative {
            expected.push((DEC_W, (d, m)));
            expected.push((DEC_B, (1, m)));
        }
        if expected.len() != self.store.names().count() {
            return Err(Error::Integrity(format!(
                "{} parameters expected for the {} architecture, found {}",
                expected.len(),
                self.arch,
                self.store.names().count()
            )));
        }
        for (name, shape) in expected {
            let m = self
                .store
                .get(name)
                .ok_or_else(|| Error::Integrity(format!("missing parameter `{name}`")))?;
            if m.dim() != shape {
                return Err(Error::Shape {
                    op: "model parameters",
                    left: m.dim(),
                    right: shape,
                });
            }
        }
        if !self.store.is_finite() {
            return Err(Error::Numerical("model parameters are not finite".into()));
        }
        Ok(())
    }
}

fn input_dim(arch: Architecture, m: usize) -> usize {
    match arch {
        Architecture::Generative => 2 * m,
        Architecture::Baseline => 3 * m,
    }
}

// ---------------------------------------------------------------------------
// Batches

/// Dense view of a group of patients, one `B×M` slice per bin.
///
/// Cells with `mask == 0` carry no information; every computation that
/// reads `values` goes through the mask first.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub covariates: Matrix,
    pub values: Vec<Matrix>,
    pub mask: Vec<Matrix>,
    pub labels: Matrix,
}

impl Batch {
    /// Gathers `patients` (indices into `ds`) from per-patient entry lists
    /// as produced by [`TensorDataset::entries_by_patient`].
    pub fn gather(ds: &TensorDataset, by_patient: &[Vec<Entry>], patients: &[usize]) -> Self {
        let (b, m, t) = (patients.len(), ds.n_features, ds.n_bins);
        let k = ds.n_covariates();
        let mut values = vec![Matrix::zeros((b, m)); t];
        let mut mask = vec![Matrix::zeros((b, m)); t];
        let mut covariates = Matrix::zeros((b, k));
        let mut labels = Matrix::zeros((b, 1));
        for (row, &i) in patients.iter().enumerate() {
            for (c, v) in ds.covariates[i].iter().enumerate() {
                covariates[[row, c]] = *v;
            }
            labels[[row, 0]] = f64::from(ds.labels[i]);
            for e in &by_patient[i] {
                values[e.t][[row, e.j]] = e.value;
                mask[e.t][[row, e.j]] = 1.0;
            }
        }
        Batch {
            covariates,
            values,
            mask,
            labels,
        }
    }

    pub fn from_dataset(ds: &TensorDataset, patients: &[usize]) -> Self {
        Self::gather(ds, &ds.entries_by_patient(), patients)
    }

    pub fn len(&self) -> usize {
        self.labels.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_bins(&self) -> usize {
        self.values.len()
    }

    pub fn observed_cells(&self) -> usize {
        self.mask
            .iter()
            .map(|m| m.iter().filter(|&&v| v != 0.0).count())
            .sum()
    }

    /// Per-feature time since the last observation (inclusive of the
    /// current bin), divided by the horizon; `(t + 1) / T` before the
    /// first observation.
    pub fn elapsed(&self) -> Vec<Matrix> {
        let t_len = self.n_bins();
        let horizon = t_len as f64;
        let Some(first) = self.mask.first() else {
            return Vec::new();
        };
        let mut last: Array2<Option<usize>> = Array2::from_elem(first.dim(), None);
        let mut out = Vec::with_capacity(t_len);
        for (t, mask) in self.mask.iter().enumerate() {
            let mut dt = Matrix::zeros(mask.dim());
            for ((idx, &m), slot) in mask.indexed_iter().zip(last.iter_mut()) {
                if m != 0.0 {
                    *slot = Some(t);
                }
                dt[idx] = match *slot {
                    Some(l) => (t - l) as f64 / horizon,
                    None => (t + 1) as f64 / horizon,
                };
            }
            out.push(dt);
        }
        out
    }

    fn check(&self, params: &ModelParams) -> Result<()> {
        let m = params.n_features;
        if self.covariates.ncols() != params.n_covariates {
            return Err(Error::Shape {
                op: "batch covariates",
                left: self.covariates.dim(),
                right: (self.len(), params.n_covariates),
            });
        }
        for (v, k) in self.values.iter().zip(&self.mask) {
            if v.dim() != (self.len(), m) || k.dim() != (self.len(), m) {
                return Err(Error::Shape {
                    op: "batch values",
                    left: v.dim(),
                    right: (self.len(), m),
                });
            }
        }
        if self.values.is_empty() || self.values.len() != self.mask.len() {
            return Err(Error::Integrity("batch needs at least one time bin".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Unrolling

struct Unrolled {
    /// `h[0..=T]`, each `B×D`.
    hidden: Vec<Var>,
    /// GRU inputs `y*[0..T]`.
    inputs: Vec<Var>,
    /// `Ŷ[t] = g(h[t+1])`; empty for the baseline.
    recon: Vec<Var>,
    prob: Var,
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

fn gru_step(tape: &mut Tape, vars: &ParamVars, input: Var, h: Var) -> Result<Var> {
    let gate = |tape: &mut Tape, g: usize, h_in: Var| -> Result<Var> {
        let xw = tape.matmul(input, vars.get(GRU_W[g]))?;
        let hu = tape.matmul(h_in, vars.get(GRU_U[g]))?;
        let pre = tape.add(xw, hu)?;
        tape.add_row(pre, vars.get(GRU_B[g]))
    };
    let z_pre = gate(tape, 0, h)?;
    let z = tape.sigmoid(z_pre);
    let r_pre = gate(tape, 1, h)?;
    let r = tape.sigmoid(r_pre);
    let rh = tape.mul(r, h)?;
    let cand_pre = gate(tape, 2, rh)?;
    let cand = tape.tanh(cand_pre);
    // (1 − z)⊙h + z⊙h̃ written as h + z⊙(h̃ − h)
    let diff = tape.sub(cand, h)?;
    let step = tape.mul(z, diff)?;
    tape.add(h, step)
}

fn check_finite(tape: &Tape, v: Var, t: usize) -> Result<()> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "non-finite activation at time step {t}"
        )))
    }
}

fn unroll(
    tape: &mut Tape,
    vars: &ParamVars,
    params: &ModelParams,
    batch: &Batch,
) -> Result<Unrolled> {
    batch.check(params)?;
    let x = tape.constant(batch.covariates.clone());
    let h0_pre = affine(tape, x, vars.get(BETA_W), vars.get(BETA_B))?;
    let mut h = tape.tanh(h0_pre);
    check_finite(tape, h, 0)?;
    let mut hidden = vec![h];
    let mut inputs = Vec::with_capacity(batch.n_bins());
    let mut recon = Vec::new();

    match params.arch {
        Architecture::Generative => {
            let (dec_w, dec_b) = (vars.get(DEC_W), vars.get(DEC_B));
            let mut pred = affine(tape, h, dec_w, dec_b)?;
            for (t, (values, mask)) in batch.values.iter().zip(&batch.mask).enumerate() {
                let filled = tape.mask_fill(pred, values, mask)?;
                let mask_in = tape.constant(mask.clone());
                let input = tape.concat_cols(&[filled, mask_in])?;
                h = gru_step(tape, vars, input, h)?;
                check_finite(tape, h, t)?;
                // The reconstruction of bin t is also the prediction that
                // fills bin t + 1.
                pred = affine(tape, h, dec_w, dec_b)?;
                inputs.push(input);
                hidden.push(h);
                recon.push(pred);
            }
        }
        Architecture::Baseline => {
            let elapsed = batch.elapsed();
            for (t, ((values, mask), dt)) in batch
                .values
                .iter()
                .zip(&batch.mask)
                .zip(elapsed)
                .enumerate()
            {
                let mut imputed = values.clone();
                ndarray::Zip::from(&mut imputed)
                    .and(mask)
                    .for_each(|v, &m| {
                        if m == 0.0 {
                            *v = 0.0;
                        }
                    });
                let row = ndarray::concatenate(
                    ndarray::Axis(1),
                    &[imputed.view(), mask.view(), dt.view()],
                )
                .map_err(|e| Error::Numerical(e.to_string()))?;
                let input = tape.constant(row);
                h = gru_step(tape, vars, input, h)?;
                check_finite(tape, h, t)?;
                inputs.push(input);
                hidden.push(h);
            }
        }
    }

    let logit = affine(tape, h, vars.get(CLS_W), vars.get(CLS_B))?;
    let prob = tape.sigmoid(logit);
    Ok(Unrolled {
        hidden,
        inputs,
        recon,
        prob,
    })
}

// ---------------------------------------------------------------------------
// Single-patient forward pass

/// One patient's covariates and dense `T×M` values with mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientInput {
    pub covariates: Vec<f64>,
    pub values: Matrix,
    pub mask: Matrix,
}

impl PatientInput {
    pub fn from_dataset(ds: &TensorDataset, i: usize) -> Self {
        let mut values = Matrix::zeros((ds.n_bins, ds.n_features));
        let mut mask = Matrix::zeros((ds.n_bins, ds.n_features));
        for e in ds.entries.iter().filter(|e| e.i == i) {
            values[[e.t, e.j]] = e.value;
            mask[[e.t, e.j]] = 1.0;
        }
        PatientInput {
            covariates: ds.covariates[i].clone(),
            values,
            mask,
        }
    }

    fn to_batch(&self) -> Batch {
        let m = self.values.ncols();
        let row = |a: &Matrix, t: usize| {
            a.row(t)
                .to_owned()
                .into_shape_with_order((1, m))
                .expect("row reshape")
        };
        let t_len = self.values.nrows();
        Batch {
            covariates: Matrix::from_shape_vec((1, self.covariates.len()), self.covariates.clone())
                .expect("covariate row"),
            values: (0..t_len).map(|t| row(&self.values, t)).collect(),
            mask: (0..t_len).map(|t| row(&self.mask, t)).collect(),
            labels: Matrix::zeros((1, 1)),
        }
    }
}

/// Everything the unroll produced for one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `h[0..=T]`.
    pub hidden: Vec<Vec<f64>>,
    /// GRU input at each bin (`2M` generative, `3M` baseline).
    pub inputs: Vec<Vec<f64>>,
    /// `Ŷ[t]` per bin; empty for the baseline.
    pub reconstruction: Vec<Vec<f64>>,
    pub prob: f64,
}

fn trace(params: &ModelParams, patient: &PatientInput) -> Result<ForwardTrace> {
    let batch = patient.to_batch();
    let mut tape = Tape::new();
    let vars = params.store.register(&mut tape);
    let u = unroll(&mut tape, &vars, params, &batch)?;
    let rows = |vs: &[Var]| -> Vec<Vec<f64>> {
        vs.iter()
            .map(|v| tape.value(*v).iter().copied().collect())
            .collect()
    };
    Ok(ForwardTrace {
        hidden: rows(&u.hidden),
        inputs: rows(&u.inputs),
        reconstruction: rows(&u.recon),
        prob: tape.scalar(u.prob),
    })
}

/// Generative forward pass with prediction-based imputation.
pub fn forward(params: &ModelParams, patient: &PatientInput) -> Result<ForwardTrace> {
    if params.arch != Architecture::Generative {
        return Err(Error::Config(
            "forward expects generative parameters".into(),
        ));
    }
    trace(params, patient)
}

/// Baseline forward pass on mean-imputed values, mask and elapsed time.
pub fn forward_baseline(params: &ModelParams, patient: &PatientInput) -> Result<ForwardTrace> {
    if params.arch != Architecture::Baseline {
        return Err(Error::Config(
            "forward_baseline expects baseline parameters".into(),
        ));
    }
    trace(params, patient)
}

// ---------------------------------------------------------------------------
// Loss

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean squared error over observed cells (zero when not evaluated).
    pub mse: f64,
    pub bce: f64,
    /// `Σ‖W‖²`, before multiplying by lambda.
    pub penalty: f64,
    /// The reconstruction term was requested but the batch had no observed
    /// cells.
    pub empty_reconstruction: bool,
}

fn build_loss(
    tape: &mut Tape,
    vars: &ParamVars,
    params: &ModelParams,
    batch: &Batch,
    gamma: f64,
    lambda: f64,
) -> Result<(Var, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::Config("loss of an empty batch".into()));
    }
    let u = unroll(tape, vars, params, batch)?;
    // The baseline has no reconstruction head.
    let gamma = match params.arch {
        Architecture::Generative => gamma,
        Architecture::Baseline => 0.0,
    };
    let mut breakdown = LossBreakdown {
        total: 0.0,
        mse: 0.0,
        bce: 0.0,
        penalty: 0.0,
        empty_reconstruction: false,
    };
    let mut terms = Vec::new();

    if gamma > 0.0 {
        let n_obs = batch.observed_cells();
        if n_obs == 0 {
            breakdown.empty_reconstruction = true;
        } else {
            let mut sse: Option<Var> = None;
            for ((pred, values), mask) in u.recon.iter().zip(&batch.values).zip(&batch.mask) {
                let e = tape.masked_sq_err(*pred, values, mask)?;
                sse = Some(match sse {
                    Some(acc) => tape.add(acc, e)?,
                    None => e,
                });
            }
            if let Some(sse) = sse {
                let mse = tape.scale(sse, 1.0 / n_obs as f64);
                breakdown.mse = tape.scalar(mse);
                terms.push(tape.scale(mse, gamma));
            }
        }
    }
    if gamma < 1.0 {
        let bce = tape.bce(u.prob, &batch.labels)?;
        breakdown.bce = tape.scalar(bce);
        terms.push(tape.scale(bce, 1.0 - gamma));
    }
    if lambda > 0.0 {
        let mut pen: Option<Var> = None;
        for name in params.weight_names() {
            let sq = tape.sum_squares(vars.get(name));
            pen = Some(match pen {
                Some(acc) => tape.add(acc, sq)?,
                None => sq,
            });
        }
        if let Some(pen) = pen {
            breakdown.penalty = tape.scalar(pen);
            terms.push(tape.scale(pen, lambda));
        }
    }
    let mut total = match terms.first() {
        Some(t) => *t,
        None => tape.constant(Matrix::zeros((1, 1))),
    };
    for t in terms.iter().skip(1) {
        total = tape.add(total, *t)?;
    }
    breakdown.total = tape.scalar(total);
    Ok((total, breakdown))
}

/// `gamma·MSE_obs + (1 − gamma)·BCE + lambda·Σ‖W‖²` on one batch.
pub fn loss(params: &ModelParams, batch: &Batch, gamma: f64, lambda: f64) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let vars = params.store.register(&mut tape);
    Ok(build_loss(&mut tape, &vars, params, batch, gamma, lambda)?.1)
}

/// Loss together with its gradient w.r.t. every parameter.
pub fn loss_and_grad(
    params: &ModelParams,
    batch: &Batch,
    gamma: f64,
    lambda: f64,
) -> Result<(LossBreakdown, ParamStore)> {
    let mut tape = Tape::new();
    let vars = params.store.register(&mut tape);
    let (out, breakdown) = build_loss(&mut tape, &vars, params, batch, gamma, lambda)?;
    let grads = tape.backward(out)?;
    Ok((breakdown, params.store.collect_grads(&vars, &grads)))
}

/// Probabilities for a batch, in row order.
pub fn batch_probs(params: &ModelParams, batch: &Batch) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = params.store.register(&mut tape);
    let u = unroll(&mut tape, &vars, params, batch)?;
    Ok(tape.value(u.prob).iter().copied().collect())
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub hparams: HyperParams,
    pub norm: NormStats,
    pub feature_ids: Vec<String>,
    /// Mean mini-batch loss per epoch, weighted by batch size.
    pub loss_trace: Vec<f64>,
    pub val_auc: f64,
    /// Batches whose reconstruction term had nothing to compare against.
    pub empty_reconstruction_batches: usize,
}

impl TrainedModel {
    pub fn arch(&self) -> Architecture {
        self.params.arch
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        container::write_json(path, MODEL_TAG, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let model: TrainedModel = container::read_json(path, MODEL_TAG)?;
        model.params.validate()?;
        Ok(model)
    }
}

const PREDICT_CHUNK: usize = 256;

fn predict_normalized(
    params: &ModelParams,
    ds: &TensorDataset,
    by_patient: &[Vec<Entry>],
    idx: &[usize],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(PREDICT_CHUNK) {
        let batch = Batch::gather(ds, by_patient, chunk);
        out.extend(batch_probs(params, &batch)?);
    }
    Ok(out)
}

/// Fits one model on the training split and scores the validation split.
pub fn train(ds: &TensorDataset, hp: &HyperParams, arch: Architecture) -> Result<TrainedModel> {
    hp.validate()?;
    ds.validate()?;
    let train_idx = ds.indices(Split::Train)?;
    let val_idx = ds.indices(Split::Val)?;
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Config(
            "train and validation splits must be nonempty".into(),
        ));
    }
    let positives = train_idx.iter().filter(|&&i| ds.labels[i] == 1).count();
    if positives == 0 || positives == train_idx.len() {
        return Err(Error::Config(
            "training split must contain both classes".into(),
        ));
    }

    let norm = NormStats::from_train(ds)?;
    let nds = data::normalize(ds, &norm)?;
    let by_patient = nds.entries_by_patient();

    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut params = ModelParams::init(
        arch,
        nds.n_covariates(),
        nds.n_features,
        hp.latent_dim,
        &mut rng,
    );
    let mut opt = Adam::new(&params.store, hp.learning_rate);
    let mut order = train_idx.clone();
    let mut loss_trace = Vec::with_capacity(hp.epochs);
    let mut empty_batches = 0;

    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for (b, chunk) in order.chunks(hp.batch_size).enumerate() {
            let batch = Batch::gather(&nds, &by_patient, chunk);
            let (lb, mut grads) =
                loss_and_grad(&params, &batch, hp.gamma, hp.lambda).map_err(|e| match e {
                    Error::Numerical(msg) => {
                        Error::Numerical(format!("epoch {epoch}, batch {b}: {msg}"))
                    }
                    other => other,
                })?;
            if !lb.total.is_finite() || !grads.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch}, batch {b}"
                )));
            }
            if lb.empty_reconstruction {
                empty_batches += 1;
            }
            if let Some(c) = hp.grad_clip_norm {
                ndiff::clip_global_norm(&mut grads, c);
            }
            opt.step(&mut params.store, &grads);
            weighted += lb.total * chunk.len() as f64;
        }
        let epoch_loss = weighted / order.len() as f64;
        debug!("epoch {epoch}: loss {epoch_loss:.6}");
        loss_trace.push(epoch_loss);
    }
    if empty_batches > 0 {
        warn!("{empty_batches} batches had no observed cells for the reconstruction term");
    }

    let val_scores = predict_normalized(&params, &nds, &by_patient, &val_idx)?;
    let val_labels: Vec<u8> = val_idx.iter().map(|&i| ds.labels[i]).collect();
    let val_auc = eval::auc(&val_scores, &val_labels)?;

    Ok(TrainedModel {
        params,
        hparams: hp.clone(),
        norm,
        feature_ids: ds.feature_ids.clone(),
        loss_trace,
        val_auc,
        empty_reconstruction_batches: empty_batches,
    })
}

/// Probabilities for the patients of `which`, in patient-index order.
pub fn predict(model: &TrainedModel, ds: &TensorDataset, which: Split) -> Result<Vec<f64>> {
    let idx = ds.indices(which)?;
    predict_indices(model, ds, &idx)
}

/// Probabilities for arbitrary patient indices of `ds`.
pub fn predict_indices(
    model: &TrainedModel,
    ds: &TensorDataset,
    idx: &[usize],
) -> Result<Vec<f64>> {
    check_compatible(model, ds)?;
    let nds = data::normalize(ds, &model.norm)?;
    let by_patient = nds.entries_by_patient();
    predict_normalized(&model.params, &nds, &by_patient, idx)
}

impl eval::Scorer for TrainedModel {
    fn score(&self, ds: &TensorDataset, which: Split) -> Result<Vec<f64>> {
        predict(self, ds, which)
    }
}

pub(crate) fn check_compatible(model: &TrainedModel, ds: &TensorDataset) -> Result<()> {
    if ds.n_features != model.params.n_features || ds.n_covariates() != model.params.n_covariates {
        return Err(Error::Shape {
            op: "predict",
            left: (ds.n_features, ds.n_covariates()),
            right: (model.params.n_features, model.params.n_covariates),
        });
    }
    if ds.feature_ids != model.feature_ids {
        return Err(Error::Integrity(
            "dataset features differ from those the model was trained on".into(),
        ));
    }
    Ok(())
}

/// Finite-difference check of the full loss of `arch` on every patient of
/// `ds`, at parameters initialized from `seed`.
pub fn grad_check_model(
    ds: &TensorDataset,
    arch: Architecture,
    latent_dim: usize,
    gamma: f64,
    lambda: f64,
    eps: f64,
    seed: u64,
) -> Result<ndiff::GradCheckReport> {
    let all: Vec<usize> = (0..ds.n_patients).collect();
    let batch = Batch::from_dataset(ds, &all);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams::init(arch, ds.n_covariates(), ds.n_features, latent_dim, &mut rng);
    let template = params.clone();
    ndiff::grad_check(
        |store| {
            let p = ModelParams {
                store: store.clone(),
                ..template.clone()
            };
            let (lb, g) = loss_and_grad(&p, &batch, gamma, lambda)?;
            Ok((lb.total, g))
        },
        &params.store,
        eps,
    )
}
