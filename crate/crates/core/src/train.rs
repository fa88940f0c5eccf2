//! Training loop, optimizers and held-out evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, KeyValues};
use crate::datagen::{read_dataset, record_rng, DataError, Dataset};
use crate::diff::{GradVector, KahanSum};
use crate::losses::{self, LossConfig, LossError, LossKind, PreferencePair};
use crate::policy::{PolicyError, TabularPolicy};
use crate::risk::{RiskKind, RiskMeasureSpec};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: usize, what: &'static str },
    #[error("parameter vector has {params} entries but gradient has {grad}")]
    Shape { params: usize, grad: usize },
    #[error("{0}")]
    Dataset(String),
    #[error("{path}: {detail}")]
    Io { path: String, detail: String },
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |e| TrainError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam_default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Decoupled weight decay applied as `θ ← θ − lr·wd·θ`.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::adam_default(),
            learning_rate: 1e-2,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.kind {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2)) {
                return Err("adam betas must lie in [0, 1)".into());
            }
            if !(eps > 0.0) {
                return Err("adam_eps must be > 0".into());
            }
        }
        Ok(())
    }
}

/// Moment accumulators and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        OptimizerState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One update of `params` in place.
pub fn optimizer_step(
    state: &mut OptimizerState,
    params: &mut [f64],
    grad: &[f64],
    config: &OptimizerConfig,
) -> Result<()> {
    if params.len() != grad.len() || state.m.len() != params.len() {
        return Err(TrainError::Shape {
            params: params.len(),
            grad: grad.len(),
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFinite {
            step: state.t as usize + 1,
            what: "gradient",
        });
    }
    state.t += 1;
    let lr = config.learning_rate;
    let wd = config.weight_decay;
    match config.kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.iter_mut().zip(grad) {
                let decay = if wd > 0.0 { wd * *p } else { 0.0 };
                *p -= lr * (g + decay);
            }
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            let t = state.t as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            for i in 0..params.len() {
                let g = grad[i];
                state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
                state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
                let m_hat = state.m[i] / c1;
                let v_hat = state.v[i] / c2;
                let decay = if wd > 0.0 { wd * params[i] } else { 0.0 };
                params[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + decay);
            }
        }
    }
    Ok(())
}

/// Every knob of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub epochs: usize,
    /// Optimizer steps between metric rows.
    pub eval_every: usize,
    pub seed: u64,
    /// Length cap when sampling from θ to measure truncation.
    pub max_gen_len: usize,
    pub dataset: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossConfig {
                kind: LossKind::Dpo,
                beta: 0.1,
                delta_beta: None,
            },
            optimizer: OptimizerConfig::default(),
            batch_size: 16,
            grad_accum_steps: 4,
            epochs: 3,
            eval_every: 25,
            seed: 0,
            max_gen_len: 16,
            dataset: None,
            reference: None,
            out_dir: None,
        }
    }
}

/// Learning rate of the `llm` preset, sized for billion-parameter models.
pub const LLM_LEARNING_RATE: f64 = 5e-6;

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "loss",
        "beta",
        "alpha",
        "measure",
        "mu",
        "delta_beta",
        "preset",
        "learning_rate",
        "optimizer",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "weight_decay",
        "batch_size",
        "grad_accum_steps",
        "epochs",
        "eval_every",
        "seed",
        "max_gen_len",
        "dataset",
        "ref",
        "out_dir",
    ];

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.check_keys(Self::KEYS)?;
        let d = TrainConfig::default();
        let bad = |key: &str, detail: String| ConfigError::Value {
            key: key.to_string(),
            detail,
        };

        let measure = match kv.get_str("measure") {
            None => {
                if kv.get_str("mu").is_some() {
                    return Err(bad("mu", "given without a measure".into()).into());
                }
                None
            }
            Some(name) => {
                let kind: RiskKind = name.parse().map_err(|e: crate::risk::RiskError| bad("measure", e.to_string()))?;
                let mu = match kind {
                    RiskKind::Neutral => kv.get_or("mu", 1.0)?,
                    _ => kv
                        .get::<f64>("mu")?
                        .ok_or_else(|| bad("mu", format!("required for measure `{name}`")))?,
                };
                Some(RiskMeasureSpec::new(kind, mu).map_err(|e| bad("mu", e.to_string()))?)
            }
        };
        let loss_name = kv.get_str("loss").unwrap_or("dpo");
        let kind = LossKind::from_parts(loss_name, kv.get("alpha")?, measure)
            .map_err(|e| bad("loss", e.to_string()))?;
        let loss = LossConfig {
            kind,
            beta: kv.get_or("beta", d.loss.beta)?,
            delta_beta: kv.get("delta_beta")?,
        };
        loss.validate().map_err(|e| bad("beta", e.to_string()))?;

        let preset_lr = match kv.get_str("preset") {
            None => d.optimizer.learning_rate,
            Some("llm") => LLM_LEARNING_RATE,
            Some(other) => return Err(bad("preset", format!("unknown preset `{other}`")).into()),
        };
        let adam = OptimizerKind::Adam {
            beta1: kv.get_or("adam_beta1", 0.9)?,
            beta2: kv.get_or("adam_beta2", 0.999)?,
            eps: kv.get_or("adam_eps", 1e-8)?,
        };
        let kind = match kv.get_str("optimizer").unwrap_or("adam") {
            "sgd" => OptimizerKind::Sgd,
            "adam" | "adamw" => adam,
            other => return Err(bad("optimizer", format!("unknown optimizer `{other}`")).into()),
        };
        let optimizer = OptimizerConfig {
            kind,
            learning_rate: kv.get_or("learning_rate", preset_lr)?,
            weight_decay: kv.get_or("weight_decay", 0.0)?,
        };
        optimizer.validate().map_err(|e| bad("optimizer", e))?;

        let cfg = TrainConfig {
            loss,
            optimizer,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            grad_accum_steps: kv.get_or("grad_accum_steps", d.grad_accum_steps)?,
            epochs: kv.get_or("epochs", d.epochs)?,
            eval_every: kv.get_or("eval_every", d.eval_every)?,
            seed: kv.get_or("seed", d.seed)?,
            max_gen_len: kv.get_or("max_gen_len", d.max_gen_len)?,
            dataset: kv.get_str("dataset").map(PathBuf::from),
            reference: kv.get_str("ref").map(PathBuf::from),
            out_dir: kv.get_str("out_dir").map(PathBuf::from),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: &str| {
            TrainError::Config(ConfigError::Value {
                key: key.to_string(),
                detail: detail.to_string(),
            })
        };
        self.loss.validate()?;
        self.optimizer.validate().map_err(|e| bad("optimizer", &e))?;
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be >= 1"));
        }
        if self.grad_accum_steps == 0 {
            return Err(bad("grad_accum_steps", "must be >= 1"));
        }
        if self.eval_every == 0 {
            return Err(bad("eval_every", "must be >= 1"));
        }
        if self.max_gen_len == 0 {
            return Err(bad("max_gen_len", "must be >= 1"));
        }
        Ok(())
    }
}

/// Held-out quantities at one parameter value.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EvalMetrics {
    pub reward_accuracy: f64,
    pub seqkl_chosen: f64,
    pub seqkl_rejected: f64,
    pub seqrr_chosen: f64,
    pub seqrr_rejected: f64,
    pub margin_mean: f64,
}

/// Reward accuracy (ties count one half), mean sequential divergences under
/// `loss`'s measure, and the mean margin.
pub fn evaluate(
    theta: &TabularPolicy,
    reference: &TabularPolicy,
    pairs: &[PreferencePair],
    loss: &LossConfig,
) -> Result<EvalMetrics> {
    if pairs.is_empty() {
        return Err(TrainError::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let measure = loss.kind.measure();
    let mut acc = KahanSum::default();
    let mut kl_w = KahanSum::default();
    let mut kl_l = KahanSum::default();
    let mut rr_w = KahanSum::default();
    let mut rr_l = KahanSum::default();
    let mut margin = KahanSum::default();
    for p in pairs {
        let u = losses::margin_value(theta, reference, p, loss.beta)?;
        acc.add(if u > 0.0 {
            1.0
        } else if u == 0.0 {
            0.5
        } else {
            0.0
        });
        margin.add(u);
        kl_w.add(losses::seq_kl_value(theta, reference, p.prompt(), p.chosen())?);
        kl_l.add(losses::seq_kl_value(theta, reference, p.prompt(), p.rejected())?);
        rr_w.add(losses::seq_rr_value(theta, reference, p.prompt(), p.chosen(), measure)?);
        rr_l.add(losses::seq_rr_value(theta, reference, p.prompt(), p.rejected(), measure)?);
    }
    let n = pairs.len() as f64;
    Ok(EvalMetrics {
        reward_accuracy: acc.total() / n,
        seqkl_chosen: kl_w.total() / n,
        seqkl_rejected: kl_l.total() / n,
        seqrr_chosen: rr_w.total() / n,
        seqrr_rejected: rr_l.total() / n,
        margin_mean: margin.total() / n,
    })
}

/// Fraction of responses sampled from `theta` (one per prompt) that hit
/// `max_len` without emitting EOS.
pub fn truncation_rate(
    theta: &TabularPolicy,
    pairs: &[PreferencePair],
    max_len: usize,
    seed: u64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (i, p) in pairs.iter().enumerate() {
        let mut rng = record_rng(seed, i as u64);
        if theta.sample_response(p.prompt(), max_len, &mut rng)?.1 {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub train_loss: f64,
    pub reward_accuracy: f64,
    pub seqkl_chosen: f64,
    pub seqkl_rejected: f64,
    pub seqrr_chosen: f64,
    pub seqrr_rejected: f64,
    pub margin_mean: f64,
    pub truncation_rate: f64,
}

impl MetricsRow {
    pub const HEADER: &'static str = "step,train_loss,reward_accuracy,seqkl_chosen,seqkl_rejected,seqrr_chosen,seqrr_rejected,margin_mean,truncation_rate";

    pub fn new(step: usize, train_loss: f64, eval: EvalMetrics, truncation_rate: f64) -> Self {
        MetricsRow {
            step,
            train_loss,
            reward_accuracy: eval.reward_accuracy,
            seqkl_chosen: eval.seqkl_chosen,
            seqkl_rejected: eval.seqkl_rejected,
            seqrr_chosen: eval.seqrr_chosen,
            seqrr_rejected: eval.seqrr_rejected,
            margin_mean: eval.margin_mean,
            truncation_rate,
        }
    }

    pub fn values(&self) -> [f64; 8] {
        [
            self.train_loss,
            self.reward_accuracy,
            self.seqkl_chosen,
            self.seqkl_rejected,
            self.seqrr_chosen,
            self.seqrr_rejected,
            self.margin_mean,
            self.truncation_rate,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    /// Floats in 9-significant-digit scientific notation.
    pub fn to_csv_line(&self) -> String {
        let mut out = self.step.to_string();
        for v in self.values() {
            let _ = write!(out, ",{v:.8e}");
        }
        out
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(MetricsRow::HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
    pub policy: TabularPolicy,
    pub steps: usize,
}

/// Splits off the last 10% of records (rounded up) for evaluation.
pub fn split_dataset(pairs: &[PreferencePair]) -> (&[PreferencePair], &[PreferencePair]) {
    let held_out = pairs.len().div_ceil(10);
    pairs.split_at(pairs.len() - held_out)
}

/// Runs the training loop in memory, starting from a copy of `reference`.
pub fn train_on(reference: &TabularPolicy, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let reference = reference.clone_frozen();
    let (train, held_out) = split_dataset(data.pairs());
    if train.is_empty() || held_out.is_empty() {
        return Err(TrainError::Dataset(format!(
            "need at least 2 records for a train/held-out split, got {}",
            data.len()
        )));
    }
    let mut theta = reference.clone_trainable();
    let eval_seed = cfg.seed ^ 0x9e37_79b9_7f4a_7c15;

    let row = |theta: &TabularPolicy, step: usize| -> Result<MetricsRow> {
        let loss = losses::batch_loss(theta, &reference, train, &cfg.loss)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { step, what: "loss" });
        }
        let eval = evaluate(theta, &reference, held_out, &cfg.loss)?;
        let trunc = truncation_rate(theta, held_out, cfg.max_gen_len, eval_seed)?;
        Ok(MetricsRow::new(step, loss, eval, trunc))
    };

    let mut metrics = vec![row(&theta, 0)?];
    let mut state = OptimizerState::new(theta.param_count());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let micro: Vec<Vec<PreferencePair>> = order
            .chunks(cfg.batch_size)
            .map(|c| c.iter().map(|&i| train[i].clone()).collect())
            .collect();
        for group in micro.chunks(cfg.grad_accum_steps) {
            let mut grad = GradVector::zeros(theta.param_count());
            for batch in group {
                let out = losses::batch_loss_and_grad(&theta, &reference, batch, &cfg.loss)?;
                if !out.loss.is_finite() {
                    return Err(TrainError::NonFinite { step: step + 1, what: "loss" });
                }
                grad.add_scaled(&out.grad, 1.0 / group.len() as f64);
            }
            if !grad.is_finite() {
                return Err(TrainError::NonFinite { step: step + 1, what: "gradient" });
            }
            optimizer_step(&mut state, theta.logits_mut()?, grad.as_slice(), &cfg.optimizer)?;
            step += 1;
            if step.is_multiple_of(cfg.eval_every) {
                metrics.push(row(&theta, step)?);
            }
        }
    }
    if metrics.last().map(|r| r.step) != Some(step) {
        metrics.push(row(&theta, step)?);
    }
    Ok(TrainOutcome {
        metrics,
        policy: theta,
        steps: step,
    })
}

/// Paths written by [`train`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainArtifacts {
    pub metrics_csv: PathBuf,
    pub checkpoint: PathBuf,
}

/// Loads the dataset and reference named in `cfg`, trains, and writes
/// `metrics.csv` and `final.ckpt` into `out_dir`.
pub fn train(cfg: &TrainConfig) -> Result<(TrainOutcome, TrainArtifacts)> {
    let missing = |k: &str| TrainError::Config(ConfigError::Missing(k.to_string()));
    let ref_path = cfg.reference.as_deref().ok_or_else(|| missing("ref"))?;
    let data_path = cfg.dataset.as_deref().ok_or_else(|| missing("dataset"))?;
    let out_dir = cfg.out_dir.as_deref().ok_or_else(|| missing("out_dir"))?;
    if !ref_path.exists() {
        return Err(TrainError::Io {
            path: ref_path.display().to_string(),
            detail: "reference checkpoint not found".into(),
        });
    }
    if !data_path.exists() {
        return Err(TrainError::Io {
            path: data_path.display().to_string(),
            detail: "dataset not found".into(),
        });
    }
    let reference = TabularPolicy::load(ref_path)?.clone_frozen();
    let data = read_dataset(data_path, reference.vocab())?;
    let outcome = train_on(&reference, &data, cfg)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let artifacts = TrainArtifacts {
        metrics_csv: out_dir.join("metrics.csv"),
        checkpoint: out_dir.join("final.ckpt"),
    };
    fs::write(&artifacts.metrics_csv, metrics_csv(&outcome.metrics)).map_err(io_err(&artifacts.metrics_csv))?;
    outcome.policy.save(&artifacts.checkpoint)?;
    Ok((outcome, artifacts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_task, sample_dataset, TaskParams};
    use crate::policy::VocabSpec;

    fn small_setup(n: usize, seed: u64) -> (TabularPolicy, Dataset) {
        let task = gen_task(seed, TaskParams { vocab_size: 6, response_len: 6, ..TaskParams::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let reference = TabularPolicy::random(*task.vocab(), 2, 1.0, 1.0, &mut rng).unwrap().clone_frozen();
        let data = sample_dataset(&task, &reference, n, seed + 2).unwrap().dataset;
        (reference, data)
    }

    fn cfg(kind: LossKind) -> TrainConfig {
        TrainConfig {
            loss: LossConfig { kind, beta: 0.1, delta_beta: None },
            batch_size: 8,
            grad_accum_steps: 2,
            epochs: 2,
            eval_every: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn sgd_zero_gradient_is_bitwise_noop_and_linear() {
        let sgd = OptimizerConfig { kind: OptimizerKind::Sgd, learning_rate: 0.3, weight_decay: 0.0 };
        let mut p = vec![0.1, -2.5, 7.0];
        let mut st = OptimizerState::new(3);
        optimizer_step(&mut st, &mut p, &[0.0; 3], &sgd).unwrap();
        assert_eq!(p, vec![0.1, -2.5, 7.0]);
        let mut q = vec![0.0; 3];
        let g = [1.0, -0.5, 0.25];
        optimizer_step(&mut st, &mut q, &g, &sgd).unwrap();
        optimizer_step(&mut st, &mut q, &g, &sgd).unwrap();
        for i in 0..3 {
            assert_eq!(q[i], -2.0 * 0.3 * g[i]);
        }
    }

    #[test]
    fn adam_zero_gradient_and_first_step() {
        let adam = OptimizerConfig { learning_rate: 0.01, ..OptimizerConfig::default() };
        let mut p = vec![1.0, 2.0];
        let mut st = OptimizerState::new(2);
        optimizer_step(&mut st, &mut p, &[0.0, 0.0], &adam).unwrap();
        assert_eq!(p, vec![1.0, 2.0]);
        for g in [1e-3, -0.5, 40.0] {
            let mut p = vec![0.0];
            let mut st = OptimizerState::new(1);
            optimizer_step(&mut st, &mut p, &[g], &adam).unwrap();
            let expected = -0.01 * g.signum();
            assert!(((p[0] - expected) / expected).abs() < 1e-5, "{g}");
        }
    }

    #[test]
    fn optimizer_rejects_bad_input() {
        let mut st = OptimizerState::new(2);
        let mut p = vec![0.0, 0.0];
        let c = OptimizerConfig::default();
        assert!(matches!(optimizer_step(&mut st, &mut p, &[0.0], &c), Err(TrainError::Shape { .. })));
        assert!(matches!(
            optimizer_step(&mut st, &mut p, &[f64::NAN, 0.0], &c),
            Err(TrainError::NonFinite { what: "gradient", .. })
        ));
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let c = OptimizerConfig { kind: OptimizerKind::Sgd, learning_rate: 0.1, weight_decay: 0.5 };
        let mut p = vec![2.0];
        optimizer_step(&mut OptimizerState::new(1), &mut p, &[0.0], &c).unwrap();
        assert!((p[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn evaluate_at_reference_is_baseline() {
        let (reference, data) = small_setup(40, 1);
        let theta = reference.clone_trainable();
        let loss = LossConfig {
            kind: LossKind::RaDpo2 { alpha: 0.5, measure: RiskMeasureSpec::cvar(0.9).unwrap() },
            beta: 0.1,
            delta_beta: None,
        };
        let m = evaluate(&theta, &reference, data.pairs(), &loss).unwrap();
        assert_eq!(m.reward_accuracy, 0.5);
        assert_eq!(m.seqkl_chosen, 0.0);
        assert_eq!(m.seqrr_rejected, 0.0);
        assert_eq!(m.margin_mean, 0.0);
        assert!(evaluate(&theta, &reference, &[], &loss).is_err());
    }

    #[test]
    fn flipped_labels_flip_accuracy() {
        let (reference, data) = small_setup(60, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let theta = TabularPolicy::random(*reference.vocab(), 2, 1.0, 1.0, &mut rng).unwrap();
        let loss = LossConfig { kind: LossKind::Dpo, beta: 0.1, delta_beta: None };
        let a = evaluate(&theta, &reference, data.pairs(), &loss).unwrap().reward_accuracy;
        let flipped: Vec<PreferencePair> = data.pairs().iter().map(|p| p.swapped()).collect();
        let b = evaluate(&theta, &reference, &flipped, &loss).unwrap().reward_accuracy;
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_built_three_pair_evaluation() {
        let v = VocabSpec::with_size(4).unwrap();
        let reference = TabularPolicy::uniform(v, 1).unwrap().clone_frozen();
        // θ prefers token 2 everywhere
        let logits: Vec<f64> = (0..16).map(|i| if i % 4 == 2 { 1.0 } else { 0.0 }).collect();
        let theta = TabularPolicy::from_logits(v, 1, logits).unwrap();
        let pairs = vec![
            PreferencePair::new(vec![3], vec![2, 1], vec![3, 1], &v).unwrap(),
            PreferencePair::new(vec![3], vec![3, 1], vec![2, 2, 1], &v).unwrap(),
            PreferencePair::new(vec![2], vec![1], vec![2, 1], &v).unwrap(),
        ];
        let loss = LossConfig { kind: LossKind::Dpo, beta: 0.5, delta_beta: None };
        let m = evaluate(&theta, &reference, &pairs, &loss).unwrap();
        // every row of θ is softmax([0, 0, 1, 0]); the reference is uniform
        let z = 3.0 + 1f64.exp();
        let lp_other = -z.ln();
        let lp_two = 1.0 - z.ln();
        let lr = |tokens: &[u32]| -> f64 {
            tokens.iter().map(|&t| if t == 2 { lp_two } else { lp_other } - 0.25f64.ln()).sum()
        };
        let u = [
            0.5 * (lr(&[2, 1]) - lr(&[3, 1])),
            0.5 * (lr(&[3, 1]) - lr(&[2, 2, 1])),
            0.5 * (lr(&[1]) - lr(&[2, 1])),
        ];
        let kl_row: f64 = [lp_other, lp_other, lp_two, lp_other]
            .iter()
            .map(|l| 0.25 * (0.25f64.ln() - l))
            .sum();
        let acc = u.iter().filter(|&&x| x > 0.0).count() as f64 / 3.0;
        assert!((m.reward_accuracy - acc).abs() < 1e-12);
        assert!((m.margin_mean - u.iter().sum::<f64>() / 3.0).abs() < 1e-12);
        assert!((m.seqkl_chosen - kl_row * (2.0 + 2.0 + 1.0) / 3.0).abs() < 1e-12);
        assert!((m.seqkl_rejected - kl_row * (2.0 + 3.0 + 2.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_only_step_zero() {
        let (reference, data) = small_setup(30, 4);
        let out = train_on(&reference, &data, &TrainConfig { epochs: 0, ..cfg(LossKind::Dpo) }).unwrap();
        assert_eq!(out.metrics.len(), 1);
        assert_eq!(out.metrics[0].step, 0);
        assert_eq!(out.metrics[0].reward_accuracy, 0.5);
        assert_eq!(out.metrics[0].seqkl_chosen, 0.0);
        assert_eq!(out.policy.to_checkpoint_string(), reference.to_checkpoint_string());
    }

    #[test]
    fn zero_learning_rate_keeps_rows_constant() {
        let (reference, data) = small_setup(50, 5);
        let mut c = cfg(LossKind::Tdpo2 { alpha: 0.5 });
        c.optimizer.learning_rate = 0.0;
        let out = train_on(&reference, &data, &c).unwrap();
        assert!(out.metrics.len() > 2);
        let first = out.metrics[0].values();
        for r in &out.metrics[1..] {
            for (a, b) in r.values().iter().zip(first) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let (reference, data) = small_setup(200, 6);
        let c = TrainConfig {
            epochs: 3,
            ..cfg(LossKind::RaDpo1 { measure: RiskMeasureSpec::erm(2.0).unwrap() })
        };
        let a = train_on(&reference, &data, &c).unwrap();
        let b = train_on(&reference, &data, &c).unwrap();
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        assert_eq!(a.policy.to_checkpoint_string(), b.policy.to_checkpoint_string());
        let first = a.metrics.first().unwrap();
        let last = a.metrics.last().unwrap();
        assert!(last.train_loss < first.train_loss);
        assert!(a.metrics.iter().all(MetricsRow::is_finite));
    }

    #[test]
    fn csv_format() {
        let row = MetricsRow::new(
            3,
            std::f64::consts::LN_2,
            EvalMetrics { reward_accuracy: 0.5, ..EvalMetrics::default() },
            0.0,
        );
        let csv = metrics_csv(&[row]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), MetricsRow::HEADER);
        assert_eq!(
            lines.next().unwrap(),
            "3,6.93147181e-1,5.00000000e-1,0.00000000e0,0.00000000e0,0.00000000e0,0.00000000e0,0.00000000e0,0.00000000e0"
        );
    }

    #[test]
    fn config_parsing() {
        let kv = KeyValues::parse("loss=radpo2\nalpha=0.5\nmeasure=cvar\nmu=0.95\nbeta=0.1\npreset=llm\n").unwrap();
        let c = TrainConfig::from_kv(&kv).unwrap();
        assert_eq!(
            c.loss.kind,
            LossKind::RaDpo2 { alpha: 0.5, measure: RiskMeasureSpec::cvar(0.95).unwrap() }
        );
        assert_eq!(c.optimizer.learning_rate, LLM_LEARNING_RATE);
        assert_eq!(c.grad_accum_steps, 4);
        assert_eq!(c.optimizer.kind, OptimizerKind::adam_default());

        let fails = |text: &str| TrainConfig::from_kv(&KeyValues::parse(text).unwrap()).is_err();
        assert!(fails("loss=radpo1\n"));
        assert!(fails("loss=dpo\nmeasure=cvar\nmu=0.5\n"));
        assert!(fails("measure=cvar\nloss=radpo1\n"));
        assert!(fails("loss=dpo\nmu=0.5\n"));
        assert!(fails("batch_size=0\n"));
        assert!(fails("learning_rate=-1\n"));
        assert!(fails("optimizer=rmsprop\n"));
        assert!(fails("colour=blue\n"));
        assert!(!fails("learning_rate=0\n"));
    }

    #[test]
    fn split_is_last_ten_percent() {
        let (_, data) = small_setup(25, 7);
        let (train, held) = split_dataset(data.pairs());
        assert_eq!(held.len(), 3);
        assert_eq!(train.len(), 22);
        assert_eq!(held, &data.pairs()[22..]);
    }
}
