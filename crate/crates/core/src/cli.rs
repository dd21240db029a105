//! Command-line front end.
//!
//! Every flag can also be given in a `key=value` file passed with
//! `--config`; flags on the command line take precedence.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::container::{self, ENSEMBLE_TAG, MODEL_TAG};
use crate::data::{self, Aggregator, BinningSpec, SplitFractions, TensorDataset};
use crate::ensemble::{self, EnsembleModel, EnsembleSpec, LogBase};
use crate::error::{Error, Result};
use crate::eval::{self, Scorer};
use crate::model::{self, Architecture, HyperParams, TrainedModel};
use crate::synthgen::{self, Missingness, SynthConfig};

/// Maximum relative gradient error accepted by `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(
    name = "trajcast",
    version,
    about = "Generative recurrent classifier for sparsely observed trajectories",
    args_override_self = true
)]
pub struct Cli {
    /// File of `key=value` lines supplying default flag values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset from a known latent process.
    Synth(SynthArgs),
    /// Bin long-format CSV records into a dataset.
    Tensorize(TensorizeArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Train a pool of models and keep the best by validation AUC.
    Ensemble(EnsembleArgs),
    /// Score a model or ensemble on the test split.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on a tiny fixture.
    Gradcheck(GradcheckArgs),
}

fn parse_p_obs(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is outside (0, 1]"))
    }
}

#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    #[arg(long, default_value_t = 0.70)]
    pub train_frac: f64,
    #[arg(long, default_value_t = 0.15)]
    pub val_frac: f64,
    #[arg(long, default_value_t = 0.15)]
    pub test_frac: f64,
}

impl SplitArgs {
    fn fractions(&self) -> SplitFractions {
        SplitFractions::new(self.train_frac, self.val_frac, self.test_frac)
    }
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Patients.
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    /// Longitudinal features.
    #[arg(long, default_value_t = 10)]
    pub m: usize,
    /// Time bins.
    #[arg(long, default_value_t = 20)]
    pub t: usize,
    /// Static covariates.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// True latent dimension.
    #[arg(long, default_value_t = 4)]
    pub d: usize,
    /// Observation noise standard deviation.
    #[arg(long, default_value_t = 0.3)]
    pub sigma: f64,
    /// Variance of the initial-state noise (every latent dimension).
    #[arg(long, default_value_t = 0.25)]
    pub init_noise_var: f64,
    /// Variance of the transition noise (every latent dimension).
    #[arg(long, default_value_t = 0.01)]
    pub trans_noise_var: f64,
    /// Base probability that a cell is observed.
    #[arg(long, default_value_t = 0.10, value_parser = parse_p_obs)]
    pub p_obs: f64,
    /// Enables informative missingness with this slope.
    #[arg(long)]
    pub informative_slope: Option<f64>,
    #[arg(long, default_value_t = 1.5)]
    pub transition_gain: f64,
    /// Pull of the true transition towards the identity, in [0, 1].
    #[arg(long, default_value_t = 0.85)]
    pub transition_persistence: f64,
    #[arg(long, default_value_t = 6.0)]
    pub label_gain: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed of the stratified split (defaults to `--seed`).
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long, default_value = "dataset.txt")]
    pub out: PathBuf,
    #[arg(long, default_value = "ground_truth.txt")]
    pub gt_out: PathBuf,
}

impl SynthArgs {
    pub fn config(&self) -> SynthConfig {
        SynthConfig {
            obs_noise_sd: self.sigma,
            init_noise_cov: vec![self.init_noise_var; self.d],
            trans_noise_cov: vec![self.trans_noise_var; self.d],
            p_obs: self.p_obs,
            missingness: match self.informative_slope {
                Some(slope) => Missingness::Informative { slope },
                None => Missingness::Mcar,
            },
            transition_gain: self.transition_gain,
            transition_persistence: self.transition_persistence,
            label_gain: self.label_gain,
            seed: self.seed,
            ..SynthConfig::with_dims(self.n, self.m, self.t, self.k, self.d)
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TensorizeArgs {
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub covariates: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Bin width in hours.
    #[arg(long, default_value_t = 1.0)]
    pub bin_width: f64,
    /// Number of bins kept from the start of each trajectory.
    #[arg(long, default_value_t = 48)]
    pub horizon: usize,
    /// Features whose values are summed within a bin (others are averaged).
    #[arg(long, value_delimiter = ',')]
    pub sum_features: Vec<String>,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "dataset.txt")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct HyperArgs {
    /// Latent dimension.
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    #[arg(long, default_value_t = 5.0)]
    pub grad_clip: f64,
}

impl HyperArgs {
    fn hparams(&self, gamma: f64, lambda: f64, seed: u64) -> HyperParams {
        HyperParams {
            gamma,
            lambda,
            latent_dim: self.d,
            learning_rate: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            grad_clip_norm: (self.grad_clip > 0.0).then_some(self.grad_clip),
            seed,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "generative")]
    pub arch: Architecture,
    #[arg(long, default_value_t = 0.05)]
    pub gamma: f64,
    #[arg(long, default_value_t = (-5.0f64).exp())]
    pub lambda: f64,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "model.txt")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EnsembleArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub n_models: usize,
    #[arg(long, default_value_t = 20)]
    pub top_k: usize,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value_t = 0.0)]
    pub gamma_min: f64,
    #[arg(long, default_value_t = 0.1)]
    pub gamma_max: f64,
    #[arg(long, default_value_t = -8.0, allow_hyphen_values = true)]
    pub log_lambda_min: f64,
    #[arg(long, default_value_t = -2.0, allow_hyphen_values = true)]
    pub log_lambda_max: f64,
    /// `natural` or `ten`.
    #[arg(long, default_value = "natural", value_parser = parse_log_base)]
    pub log_base: LogBase,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Ensemble sizes for the size/AUC curve.
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,20")]
    pub ks: Vec<usize>,
    #[arg(long, default_value = "ensemble.txt")]
    pub out: PathBuf,
    #[arg(long, default_value = "selection.csv")]
    pub report: PathBuf,
    #[arg(long, default_value = "ensemble_curve.csv")]
    pub curve: PathBuf,
}

fn parse_log_base(s: &str) -> std::result::Result<LogBase, String> {
    match s {
        "natural" | "e" => Ok(LogBase::Natural),
        "ten" | "10" => Ok(LogBase::Ten),
        other => Err(format!("unknown log base `{other}`")),
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// A `trajcast-model/1` or `trajcast-ens/1` file.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "metrics.csv")]
    pub metrics: PathBuf,
    #[arg(long, default_value = "roc.csv")]
    pub roc: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 4)]
    pub d: usize,
    #[arg(long, default_value_t = 3)]
    pub m: usize,
    #[arg(long, default_value_t = 5)]
    pub t: usize,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,0.05,1")]
    pub gammas: Vec<f64>,
    #[arg(long, default_value_t = 1e-3)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Architecture to check; both when omitted.
    #[arg(long)]
    pub arch: Option<Architecture>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Tiny dataset for gradient checks: half the cells observed, true latent
/// dimension 2.
pub fn gradcheck_fixture(
    n: usize,
    m: usize,
    t: usize,
    k: usize,
    seed: u64,
) -> Result<TensorDataset> {
    let mut cfg = SynthConfig::with_dims(n, m, t, k, 2);
    cfg.p_obs = 0.5;
    cfg.seed = seed;
    Ok(synthgen::sample_dataset(&cfg)?.0)
}

/// Runs the gradient check for every requested `(arch, gamma)` pair and
/// returns the worst relative error together with one line per pair.
pub fn run_gradcheck(args: &GradcheckArgs) -> Result<(f64, Vec<String>)> {
    let ds = gradcheck_fixture(args.n, args.m, args.t, args.k, args.seed)?;
    let archs = match args.arch {
        Some(a) => vec![a],
        None => vec![Architecture::Generative, Architecture::Baseline],
    };
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    for arch in archs {
        for &gamma in &args.gammas {
            let r = model::grad_check_model(
                &ds,
                arch,
                args.d,
                gamma,
                args.lambda,
                args.eps,
                args.seed,
            )?;
            lines.push(format!(
                "arch={arch} gamma={gamma} coordinates={} max_rel_error={:.3e}",
                r.coordinates, r.max_rel_error
            ));
            worst = worst.max(r.max_rel_error);
        }
    }
    Ok((worst, lines))
}

/// Rewrites `argv` so that values from a `--config` file precede the
/// explicit flags of the subcommand.
fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let strings: Vec<String> = argv
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    let mut path = None;
    for (i, a) in strings.iter().enumerate() {
        if a == "--config" {
            path = strings.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("cannot read config file `{path}`: {e}")))?;
    let mut injected = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "{path}:{}: expected key=value, got `{line}`",
                n + 1
            ))
        })?;
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        injected.push(OsString::from(format!("--{key}={}", value.trim())));
    }
    // Insert after the subcommand (the first non-flag argument).
    let mut out = argv;
    let mut sub_pos = None;
    let mut i = 1;
    while i < strings.len() {
        match strings[i].as_str() {
            "--config" => i += 2,
            a if a.starts_with('-') => i += 1,
            _ => {
                sub_pos = Some(i);
                break;
            }
        }
    }
    let at = sub_pos.map_or(out.len(), |p| p + 1);
    out.splice(at..at, injected);
    Ok(out)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let cfg = args.config();
    let (ds, gt) = synthgen::sample_dataset(&cfg)?;
    let ds = data::split(
        &ds,
        args.split.fractions(),
        args.split_seed.unwrap_or(args.seed),
    )?;
    ds.write(&args.out)?;
    gt.write(&args.gt_out)?;
    let positives = ds.labels.iter().filter(|&&z| z == 1).count();
    println!(
        "patients={} features={} bins={} entries={} fill_rate={:.4} positive_rate={:.4}",
        ds.n_patients,
        ds.n_features,
        ds.n_bins,
        ds.entries.len(),
        data::fill_rate(&ds),
        positives as f64 / ds.n_patients as f64
    );
    Ok(())
}

fn cmd_tensorize(args: &TensorizeArgs) -> Result<()> {
    let (records, covariates, labels) =
        data::ingest_long_csv(&args.records, &args.covariates, &args.labels)?;
    let mut spec = BinningSpec::new(args.bin_width, args.horizon);
    for f in args.sum_features.iter().collect::<BTreeSet<_>>() {
        spec = spec.with_aggregator(f, Aggregator::Sum);
    }
    let (ds, report) = data::tensorize(&records, &covariates, &labels, &spec)?;
    let ds = data::split(&ds, args.split.fractions(), args.seed)?;
    ds.write(&args.out)?;
    println!(
        "patients={} features={} bins={} entries={} fill_rate={:.4} dropped_beyond_horizon={} merged={}",
        ds.n_patients,
        ds.n_features,
        ds.n_bins,
        ds.entries.len(),
        data::fill_rate(&ds),
        report.dropped_beyond_horizon,
        report.merged
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let ds = TensorDataset::read(&args.data)?;
    let hp = args.hyper.hparams(args.gamma, args.lambda, args.seed);
    let trained = model::train(&ds, &hp, args.arch)?;
    trained.write(&args.out)?;
    println!(
        "arch={} val_auc={:.6} final_loss={:.6}",
        args.arch,
        trained.val_auc,
        trained.loss_trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_ensemble(args: &EnsembleArgs) -> Result<()> {
    let ds = TensorDataset::read(&args.data)?;
    let spec = EnsembleSpec {
        n_models: args.n_models,
        top_k: args.top_k,
        gamma_range: (args.gamma_min, args.gamma_max),
        log_lambda_range: (args.log_lambda_min, args.log_lambda_max),
        log_base: args.log_base,
        template: args.hyper.hparams(0.0, 0.0, 0),
        master_seed: args.seed,
    };
    let run = ensemble::run_ensemble(&ds, &spec, args.workers)?;
    run.ensemble.write(&args.out)?;
    write(&args.report, &ensemble::selection_csv(&run.ensemble.report))?;

    let n_ok = ensemble::rank(&run.pool).len();
    let ks: Vec<usize> = args
        .ks
        .iter()
        .copied()
        .filter(|&k| k >= 1 && k <= n_ok)
        .collect();
    let curve = ensemble::ensemble_curve(&run.pool, &ds, &ks)?;
    write(&args.curve, &ensemble::curve_csv(&curve))?;

    let val_scores = run.ensemble.score(&ds, data::Split::Val)?;
    let val_idx = ds.indices(data::Split::Val)?;
    let val_labels: Vec<u8> = val_idx.iter().map(|&i| ds.labels[i]).collect();
    let ens_val_auc = eval::auc(&val_scores, &val_labels)?;
    println!(
        "selected {}/{} models ({} succeeded); ensemble val_auc={:.6} mean member val_auc={:.6}",
        run.ensemble.members.len(),
        args.n_models,
        n_ok,
        ens_val_auc,
        run.ensemble.mean_member_val_auc()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let ds = TensorDataset::read(&args.data)?;
    let tag = container::peek_tag(&args.model)?;
    let scorer: Box<dyn Scorer> = match tag.as_str() {
        MODEL_TAG => Box::new(TrainedModel::read(&args.model)?),
        ENSEMBLE_TAG => Box::new(EnsembleModel::read(&args.model)?),
        other => {
            return Err(Error::Format {
                expected: format!("{MODEL_TAG} or {ENSEMBLE_TAG}"),
                found: other.to_string(),
            })
        }
    };
    let report = eval::report(scorer.as_ref(), &ds)?;
    write(&args.metrics, &report.metrics.to_csv())?;
    write(&args.roc, &report.roc.to_csv())?;
    println!(
        "test_auc={:.6} val_auc={:.6}",
        report.metrics.get("test_auc").unwrap_or(f64::NAN),
        report.metrics.get("val_auc").unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<i32> {
    let (worst, lines) = run_gradcheck(args)?;
    for l in lines {
        println!("{l}");
    }
    println!("max_rel_error={worst:.3e}");
    Ok(if worst < GRADCHECK_TOLERANCE { 0 } else { 3 })
}

/// Parses `argv` and runs the selected command, returning the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a).map(|_| 0),
        Command::Tensorize(a) => cmd_tensorize(a).map(|_| 0),
        Command::Train(a) => cmd_train(a).map(|_| 0),
        Command::Ensemble(a) => cmd_ensemble(a).map(|_| 0),
        Command::Eval(a) => cmd_eval(a).map(|_| 0),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
