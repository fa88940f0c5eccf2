//! The `radpo` command line.
//!
//! Exit codes: 0 on success, 1 on usage or validation errors, 2 when the
//! verification suite reports a failed check.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::config::KeyValues;
use crate::datagen::{build_synthetic, read_dataset, write_dataset, SyntheticConfig, TaskParams};
use crate::losses;
use crate::oracle::{run_verification_suite, SuiteSizes};
use crate::policy::TabularPolicy;
use crate::risk::{self, Categorical, RiskKind, RiskMeasureSpec};
use crate::train::{self, metrics_csv, MetricsRow, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "radpo", version, about = "Risk-aware token-level preference optimization on tabular policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic task, reference policy and preference dataset.
    Gen(GenArgs),
    /// Train a policy on a preference dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint against the reference on a dataset.
    Eval(EvalArgs),
    /// Run the numeric identity suite and print its report.
    Verify(VerifyArgs),
    /// Aggregate a categorical distribution read from a file.
    Riskcalc(RiskArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// key=value file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long = "prompt_len", alias = "prompt-len")]
    prompt_len: Option<usize>,
    /// Maximum response length, EOS included.
    #[arg(long = "response_len", alias = "response-len")]
    response_len: Option<usize>,
    #[arg(long = "score_window", alias = "score-window")]
    score_window: Option<usize>,
    #[arg(long = "score_scale", alias = "score-scale")]
    score_scale: Option<f64>,
    #[arg(long)]
    pairs: Option<usize>,
    /// Context window of the reference policy.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long = "ref_scale", alias = "ref-scale")]
    ref_scale: Option<f64>,
    #[arg(long = "eos_bias", alias = "eos-bias", allow_hyphen_values = true)]
    eos_bias: Option<f64>,
    /// Directory receiving task.txt, ref.ckpt and data.txt.
    #[arg(long = "out_dir", alias = "out-dir")]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct LossArgs {
    /// dpo | tdpo1 | tdpo2 | radpo1 | radpo2
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// neutral | cvar | erm
    #[arg(long)]
    measure: Option<String>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long = "delta_beta", alias = "delta-beta")]
    delta_beta: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    loss: LossArgs,
    /// Named defaults; `llm` sets the learning rate to 5e-6.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long = "learning_rate", alias = "learning-rate", alias = "lr")]
    learning_rate: Option<f64>,
    /// sgd | adam | adamw
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long = "adam_beta1", alias = "adam-beta1")]
    adam_beta1: Option<f64>,
    #[arg(long = "adam_beta2", alias = "adam-beta2")]
    adam_beta2: Option<f64>,
    #[arg(long = "adam_eps", alias = "adam-eps")]
    adam_eps: Option<f64>,
    #[arg(long = "weight_decay", alias = "weight-decay")]
    weight_decay: Option<f64>,
    #[arg(long = "batch_size", alias = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long = "grad_accum_steps", alias = "grad-accum-steps")]
    grad_accum_steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "eval_every", alias = "eval-every")]
    eval_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "max_gen_len", alias = "max-gen-len")]
    max_gen_len: Option<usize>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Reference checkpoint.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    #[arg(long = "out_dir", alias = "out-dir")]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    loss: LossArgs,
    /// Checkpoint to evaluate; defaults to the reference itself.
    #[arg(long)]
    theta: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    #[arg(long = "max_gen_len", alias = "max-gen-len")]
    max_gen_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Random MDPs per identity check.
    #[arg(long, default_value_t = 100)]
    mdps: usize,
    /// Filtered trials per improvement search.
    #[arg(long, default_value_t = 1000)]
    trials: usize,
}

#[derive(Debug, Args)]
struct RiskArgs {
    /// Lines of `probability value`; `#` starts a comment.
    #[arg(long)]
    file: PathBuf,
    /// neutral | cvar | erm
    #[arg(long, default_value = "neutral")]
    measure: String,
    #[arg(long)]
    mu: Option<f64>,
    /// penalty (upper tail) or value (lower tail)
    #[arg(long, default_value = "penalty")]
    orientation: String,
    /// Accepted for uniformity; the computation is deterministic.
    #[arg(long)]
    seed: Option<u64>,
}

/// Failure carrying its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

type CliResult = std::result::Result<(), Failure>;

/// Validation failure (exit code 1).
fn fail(message: impl std::fmt::Display) -> Failure {
    Failure {
        code: 1,
        message: message.to_string(),
    }
}

/// Parses `argv` (program name first) and runs the chosen subcommand.
pub fn run<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Verify(a) => cmd_verify(a, out),
        Command::Riskcalc(a) => cmd_riskcalc(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn base_kv(config: Option<&Path>) -> std::result::Result<KeyValues, Failure> {
    match config {
        Some(p) => KeyValues::load(p).map_err(fail),
        None => Ok(KeyValues::new()),
    }
}

fn put<T: ToString>(kv: &mut KeyValues, key: &str, value: &Option<T>) {
    if let Some(v) = value {
        kv.set(key, &v.to_string());
    }
}

fn put_path(kv: &mut KeyValues, key: &str, value: &Option<PathBuf>) {
    if let Some(v) = value {
        kv.set(key, &v.display().to_string());
    }
}

fn put_loss(kv: &mut KeyValues, a: &LossArgs) {
    put(kv, "loss", &a.loss);
    put(kv, "beta", &a.beta);
    put(kv, "alpha", &a.alpha);
    put(kv, "measure", &a.measure);
    put(kv, "mu", &a.mu);
    put(kv, "delta_beta", &a.delta_beta);
}

const GEN_KEYS: &[&str] = &[
    "seed",
    "vocab",
    "prompt_len",
    "response_len",
    "score_window",
    "score_scale",
    "pairs",
    "window",
    "ref_scale",
    "eos_bias",
    "out_dir",
];

fn cmd_gen(a: GenArgs, out: &mut dyn Write) -> CliResult {
    let mut kv = base_kv(a.config.as_deref())?;
    put(&mut kv, "seed", &a.seed);
    put(&mut kv, "vocab", &a.vocab);
    put(&mut kv, "prompt_len", &a.prompt_len);
    put(&mut kv, "response_len", &a.response_len);
    put(&mut kv, "score_window", &a.score_window);
    put(&mut kv, "score_scale", &a.score_scale);
    put(&mut kv, "pairs", &a.pairs);
    put(&mut kv, "window", &a.window);
    put(&mut kv, "ref_scale", &a.ref_scale);
    put(&mut kv, "eos_bias", &a.eos_bias);
    put_path(&mut kv, "out_dir", &a.out_dir);
    kv.check_keys(GEN_KEYS).map_err(fail)?;

    let d = SyntheticConfig::default();
    let cfg = SyntheticConfig {
        task: TaskParams {
            vocab_size: kv.get_or("vocab", d.task.vocab_size).map_err(fail)?,
            prompt_len: kv.get_or("prompt_len", d.task.prompt_len).map_err(fail)?,
            response_len: kv.get_or("response_len", d.task.response_len).map_err(fail)?,
            score_window: kv.get_or("score_window", d.task.score_window).map_err(fail)?,
            score_scale: kv.get_or("score_scale", d.task.score_scale).map_err(fail)?,
        },
        policy_window: kv.get_or("window", d.policy_window).map_err(fail)?,
        ref_scale: kv.get_or("ref_scale", d.ref_scale).map_err(fail)?,
        eos_bias: kv.get_or("eos_bias", d.eos_bias).map_err(fail)?,
        n_pairs: kv.get_or("pairs", d.n_pairs).map_err(fail)?,
    };
    let seed: u64 = kv.get_or("seed", 0).map_err(fail)?;
    let out_dir = PathBuf::from(
        kv.get_str("out_dir")
            .ok_or_else(|| fail("missing required key `out_dir`"))?,
    );
    let syn = build_synthetic(seed, &cfg).map_err(fail)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| fail(format!("{}: {e}", out_dir.display())))?;
    syn.task.save(&out_dir.join("task.txt")).map_err(fail)?;
    syn.reference.save(&out_dir.join("ref.ckpt")).map_err(fail)?;
    write_dataset(&out_dir.join("data.txt"), &syn.data.dataset).map_err(fail)?;
    let _ = writeln!(
        out,
        "wrote {} pairs to {} (truncation rate {:.4})",
        syn.data.dataset.len(),
        out_dir.display(),
        syn.data.truncation_rate()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> CliResult {
    let mut kv = base_kv(a.config.as_deref())?;
    put_loss(&mut kv, &a.loss);
    put(&mut kv, "preset", &a.preset);
    put(&mut kv, "learning_rate", &a.learning_rate);
    put(&mut kv, "optimizer", &a.optimizer);
    put(&mut kv, "adam_beta1", &a.adam_beta1);
    put(&mut kv, "adam_beta2", &a.adam_beta2);
    put(&mut kv, "adam_eps", &a.adam_eps);
    put(&mut kv, "weight_decay", &a.weight_decay);
    put(&mut kv, "batch_size", &a.batch_size);
    put(&mut kv, "grad_accum_steps", &a.grad_accum_steps);
    put(&mut kv, "epochs", &a.epochs);
    put(&mut kv, "eval_every", &a.eval_every);
    put(&mut kv, "seed", &a.seed);
    put(&mut kv, "max_gen_len", &a.max_gen_len);
    put_path(&mut kv, "dataset", &a.dataset);
    put_path(&mut kv, "ref", &a.reference);
    put_path(&mut kv, "out_dir", &a.out_dir);
    let cfg = TrainConfig::from_kv(&kv).map_err(fail)?;
    let (outcome, artifacts) = train::train(&cfg).map_err(fail)?;
    let last = outcome.metrics.last().expect("at least the step-0 row");
    let _ = writeln!(
        out,
        "trained {} steps ({}); final reward_accuracy {:.4}, seqkl_chosen {:.4e}",
        outcome.steps, cfg.loss.kind, last.reward_accuracy, last.seqkl_chosen
    );
    let _ = writeln!(out, "metrics: {}", artifacts.metrics_csv.display());
    let _ = writeln!(out, "checkpoint: {}", artifacts.checkpoint.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> CliResult {
    let mut kv = base_kv(a.config.as_deref())?;
    put_loss(&mut kv, &a.loss);
    put_path(&mut kv, "dataset", &a.dataset);
    put_path(&mut kv, "ref", &a.reference);
    put(&mut kv, "max_gen_len", &a.max_gen_len);
    put(&mut kv, "seed", &a.seed);
    put_path(&mut kv, "theta", &a.theta);
    let theta_path = kv.get_str("theta").map(PathBuf::from);
    let mut train_kv = KeyValues::new();
    for (k, v) in kv.iter().filter(|(k, _)| *k != "theta") {
        train_kv.set(k, v);
    }
    let cfg = TrainConfig::from_kv(&train_kv).map_err(fail)?;
    let ref_path = cfg.reference.clone().ok_or_else(|| fail("missing required key `ref`"))?;
    let data_path = cfg.dataset.clone().ok_or_else(|| fail("missing required key `dataset`"))?;
    for p in [Some(&ref_path), Some(&data_path), theta_path.as_ref()].into_iter().flatten() {
        if !p.exists() {
            return Err(fail(format!("{}: file not found", p.display())));
        }
    }
    let reference = TabularPolicy::load(&ref_path).map_err(fail)?.clone_frozen();
    let theta = match &theta_path {
        Some(p) => TabularPolicy::load(p).map_err(fail)?,
        None => reference.clone_trainable(),
    };
    let data = read_dataset(&data_path, reference.vocab()).map_err(fail)?;
    let loss = losses::batch_loss(&theta, &reference, data.pairs(), &cfg.loss).map_err(fail)?;
    let metrics = train::evaluate(&theta, &reference, data.pairs(), &cfg.loss).map_err(fail)?;
    let trunc = train::truncation_rate(&theta, data.pairs(), cfg.max_gen_len, cfg.seed).map_err(fail)?;
    let _ = write!(out, "{}", metrics_csv(&[MetricsRow::new(0, loss, metrics, trunc)]));
    Ok(())
}

fn cmd_verify(a: VerifyArgs, out: &mut dyn Write) -> CliResult {
    let sizes = SuiteSizes {
        mdps: a.mdps,
        improvement_trials: a.trials,
    };
    let report = run_verification_suite(a.seed, sizes).map_err(fail)?;
    let _ = write!(out, "{report}");
    if report.all_asserted_pass() {
        Ok(())
    } else {
        Err(Failure {
            code: 2,
            message: "verification failed".into(),
        })
    }
}

/// Reads `probability value` lines.
pub fn parse_distribution(text: &str) -> std::result::Result<Categorical, String> {
    let mut probs = Vec::new();
    let mut values = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split_whitespace().collect();
        let parse = |s: &str| s.parse::<f64>().map_err(|e| format!("line {}: `{s}`: {e}", i + 1));
        match cells.as_slice() {
            [p, v] => {
                probs.push(parse(p)?);
                values.push(parse(v)?);
            }
            _ => return Err(format!("line {}: expected `probability value`", i + 1)),
        }
    }
    Categorical::new(probs, values).map_err(|e| e.to_string())
}

fn cmd_riskcalc(a: RiskArgs, out: &mut dyn Write) -> CliResult {
    let text = std::fs::read_to_string(&a.file).map_err(|e| fail(format!("{}: {e}", a.file.display())))?;
    let dist = parse_distribution(&text).map_err(fail)?;
    let kind: RiskKind = a.measure.parse().map_err(fail)?;
    let mu = match (kind, a.mu) {
        (RiskKind::Neutral, m) => m.unwrap_or(1.0),
        (_, Some(m)) => m,
        (_, None) => return Err(fail(format!("--mu is required for measure `{kind}`"))),
    };
    let spec = RiskMeasureSpec::new(kind, mu).map_err(fail)?;
    let value = match a.orientation.as_str() {
        "penalty" => risk::penalty_aggregate(spec, &dist),
        "value" => risk::value_aggregate(spec, &dist),
        other => return Err(fail(format!("unknown orientation `{other}`"))),
    }
    .map_err(fail)?;
    let _ = writeln!(out, "{value}");
    Ok(())
}
