//! Python bindings: risk aggregation, tabular policies, pair losses,
//! synthetic data, training and the identity-verification suite.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use radpo_core::config::KeyValues;
use radpo_core::datagen::{self, Dataset, SyntheticConfig};
use radpo_core::losses::{self, LossConfig, LossKind, PreferencePair};
use radpo_core::oracle::{self, SuiteSizes};
use radpo_core::policy::{TabularPolicy, TokenId, VocabSpec};
use radpo_core::risk::{self, Categorical, RiskKind, RiskMeasureSpec};
use radpo_core::train::{self, TrainConfig};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn measure(kind: &str, mu: Option<f64>) -> PyResult<RiskMeasureSpec> {
    let kind: RiskKind = kind.parse().map_err(err)?;
    match kind {
        RiskKind::Neutral => Ok(RiskMeasureSpec::neutral()),
        _ => {
            let mu = mu.ok_or_else(|| err(format!("{kind} requires mu")))?;
            RiskMeasureSpec::new(kind, mu).map_err(err)
        }
    }
}

type PairTuple = (Vec<TokenId>, Vec<TokenId>, Vec<TokenId>);

fn to_pairs(pairs: Vec<PairTuple>, vocab: &VocabSpec) -> PyResult<Vec<PreferencePair>> {
    pairs
        .into_iter()
        .map(|(p, w, l)| PreferencePair::new(p, w, l, vocab).map_err(err))
        .collect()
}

fn from_pairs(pairs: &[PreferencePair]) -> Vec<PairTuple> {
    pairs
        .iter()
        .map(|p| (p.prompt().to_vec(), p.chosen().to_vec(), p.rejected().to_vec()))
        .collect()
}

/// Penalty-oriented aggregate of a categorical distribution.
#[pyfunction]
#[pyo3(signature = (probs, values, kind = "neutral", mu = None))]
fn penalty_aggregate(probs: Vec<f64>, values: Vec<f64>, kind: &str, mu: Option<f64>) -> PyResult<f64> {
    let dist = Categorical::new(probs, values).map_err(err)?;
    risk::penalty_aggregate(measure(kind, mu)?, &dist).map_err(err)
}

/// Value-oriented (lower tail) aggregate of a categorical distribution.
#[pyfunction]
#[pyo3(signature = (probs, values, kind = "neutral", mu = None))]
fn value_aggregate(probs: Vec<f64>, values: Vec<f64>, kind: &str, mu: Option<f64>) -> PyResult<f64> {
    let dist = Categorical::new(probs, values).map_err(err)?;
    risk::value_aggregate(measure(kind, mu)?, &dist).map_err(err)
}

#[pyfunction]
fn bt_probability(r1: f64, r2: f64) -> f64 {
    datagen::bt_probability(r1, r2)
}

/// Tabular n-gram softmax policy.
#[pyclass(name = "Policy")]
struct PyPolicy {
    inner: TabularPolicy,
}

#[pymethods]
impl PyPolicy {
    #[staticmethod]
    #[pyo3(signature = (vocab, window, scale = 1.0, eos_bias = 0.0, seed = 0))]
    fn random(vocab: usize, window: usize, scale: f64, eos_bias: f64, seed: u64) -> PyResult<Self> {
        let vocab = VocabSpec::with_size(vocab).map_err(err)?;
        let mut rng = datagen::record_rng(seed, 0);
        let inner = TabularPolicy::random(vocab, window, scale, eos_bias, &mut rng).map_err(err)?;
        Ok(PyPolicy { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyPolicy {
            inner: TabularPolicy::load(&path).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_checkpoint(text: &str) -> PyResult<Self> {
        Ok(PyPolicy {
            inner: TabularPolicy::parse_checkpoint(text).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn to_checkpoint(&self) -> String {
        self.inner.to_checkpoint_string()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab().size()
    }

    #[getter]
    fn bos(&self) -> TokenId {
        self.inner.vocab().bos()
    }

    #[getter]
    fn eos(&self) -> TokenId {
        self.inner.vocab().eos()
    }

    #[getter]
    fn window(&self) -> usize {
        self.inner.window()
    }

    #[getter]
    fn logits(&self) -> Vec<f64> {
        self.inner.logits().to_vec()
    }

    fn next_logprobs(&self, context: Vec<TokenId>) -> PyResult<Vec<f64>> {
        self.inner.next_logprobs(&context).map_err(err)
    }

    fn seq_logprob(&self, prompt: Vec<TokenId>, response: Vec<TokenId>) -> PyResult<f64> {
        self.inner.seq_logprob(&prompt, &response).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Policy(vocab={}, window={}, params={})",
            self.inner.vocab().size(),
            self.inner.window(),
            self.inner.param_count()
        )
    }
}

fn loss_config(
    loss: &str,
    beta: f64,
    alpha: Option<f64>,
    kind: Option<&str>,
    mu: Option<f64>,
) -> PyResult<LossConfig> {
    let m = kind.map(|k| measure(k, mu)).transpose()?;
    let kind = LossKind::from_parts(loss, alpha, m).map_err(err)?;
    LossConfig::new(kind, beta).map_err(err)
}

/// Mean pair loss and its gradient with respect to `theta`'s logits.
#[pyfunction]
#[pyo3(signature = (theta, reference, pairs, loss = "dpo", beta = 0.1, alpha = None, measure = None, mu = None))]
#[allow(clippy::too_many_arguments)]
fn loss_and_grad(
    theta: &PyPolicy,
    reference: &PyPolicy,
    pairs: Vec<PairTuple>,
    loss: &str,
    beta: f64,
    alpha: Option<f64>,
    measure: Option<&str>,
    mu: Option<f64>,
) -> PyResult<(f64, Vec<f64>)> {
    let cfg = loss_config(loss, beta, alpha, measure, mu)?;
    let pairs = to_pairs(pairs, theta.inner.vocab())?;
    let theta = theta.inner.clone_trainable();
    let reference = reference.inner.clone_frozen();
    let out = losses::batch_loss_and_grad(&theta, &reference, &pairs, &cfg).map_err(err)?;
    Ok((out.loss, out.grad.into_vec()))
}

/// Synthetic task: returns the frozen reference and the preference pairs.
#[pyfunction]
#[pyo3(signature = (seed, n_pairs = 5000, vocab = 12))]
fn generate(seed: u64, n_pairs: usize, vocab: usize) -> PyResult<(PyPolicy, Vec<PairTuple>)> {
    let mut cfg = SyntheticConfig {
        n_pairs,
        ..SyntheticConfig::default()
    };
    cfg.task.vocab_size = vocab;
    let syn = datagen::build_synthetic(seed, &cfg).map_err(err)?;
    Ok((
        PyPolicy { inner: syn.reference },
        from_pairs(syn.data.dataset.pairs()),
    ))
}

/// Trains from `reference` using `key=value` style options; returns the
/// metric rows (dicts) and the final policy.
#[pyfunction]
#[pyo3(signature = (reference, pairs, options = None))]
fn train_policy(
    reference: &PyPolicy,
    pairs: Vec<PairTuple>,
    options: Option<HashMap<String, String>>,
) -> PyResult<(Vec<HashMap<String, f64>>, PyPolicy)> {
    let mut kv = KeyValues::new();
    for (k, v) in options.unwrap_or_default() {
        kv.set(&k, &v);
    }
    let cfg = TrainConfig::from_kv(&kv).map_err(err)?;
    let data = Dataset::new(to_pairs(pairs, reference.inner.vocab())?);
    let out = train::train_on(&reference.inner, &data, &cfg).map_err(err)?;
    let columns: Vec<&str> = train::MetricsRow::HEADER.split(',').collect();
    let rows = out
        .metrics
        .iter()
        .map(|r| {
            let mut row = HashMap::new();
            row.insert(columns[0].to_string(), r.step as f64);
            for (name, v) in columns[1..].iter().zip(r.values()) {
                row.insert(name.to_string(), v);
            }
            row
        })
        .collect();
    Ok((rows, PyPolicy { inner: out.policy }))
}

/// Runs the identity suite; returns whether every asserted check passed and
/// the printed report.
#[pyfunction]
#[pyo3(signature = (seed = 7, mdps = 100, trials = 1000))]
fn verify(seed: u64, mdps: usize, trials: usize) -> PyResult<(bool, String)> {
    let report = oracle::run_verification_suite(
        seed,
        SuiteSizes {
            mdps,
            improvement_trials: trials,
        },
    )
    .map_err(err)?;
    Ok((report.all_asserted_pass(), report.to_string()))
}

#[pymodule]
fn radpo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPolicy>()?;
    m.add_function(wrap_pyfunction!(penalty_aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(value_aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(bt_probability, m)?)?;
    m.add_function(wrap_pyfunction!(loss_and_grad, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train_policy, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
