//! Synthetic preference tasks with a known additive reward.
//!
//! A [`TaskSpec`] scores every token from its preceding `score_window`
//! tokens; a response's reward is the sum of its token scores. Pairs are
//! sampled from a reference policy and labeled with Bradley-Terry
//! probabilities `σ(r₁ − r₂)`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diff::sigmoid;
use crate::losses::{LossError, PreferencePair};
use crate::policy::{ContextIndexer, PolicyError, TabularPolicy, TokenId, VocabSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("policy vocabulary does not match the task")]
    VocabMismatch,
    #[error("could not draw two distinct responses for record {0}")]
    Degenerate(usize),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Shape parameters for [`gen_task`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskParams {
    pub vocab_size: usize,
    pub prompt_len: usize,
    /// Maximum response length in tokens, EOS included.
    pub response_len: usize,
    pub score_window: usize,
    pub score_scale: f64,
}

impl Default for TaskParams {
    fn default() -> Self {
        TaskParams {
            vocab_size: 12,
            prompt_len: 2,
            response_len: 16,
            score_window: 1,
            score_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    vocab: VocabSpec,
    prompt_len: usize,
    response_len: usize,
    score_window: usize,
    score_scale: f64,
    seed: u64,
    /// `V^w × V` table: row = context of the last `w` tokens, column = token.
    scores: Vec<f64>,
}

impl TaskSpec {
    pub fn new(
        vocab: VocabSpec,
        prompt_len: usize,
        response_len: usize,
        score_window: usize,
        score_scale: f64,
        seed: u64,
        scores: Vec<f64>,
    ) -> Result<Self> {
        if response_len == 0 {
            return Err(DataError::InvalidTask("response_len must be at least 1".into()));
        }
        if score_window == 0 {
            return Err(DataError::InvalidTask("score_window must be at least 1".into()));
        }
        let rows = vocab
            .size()
            .checked_pow(score_window as u32)
            .filter(|r| r.saturating_mul(vocab.size()) <= 1 << 24)
            .ok_or_else(|| DataError::InvalidTask("score table too large".into()))?;
        if scores.len() != rows * vocab.size() {
            return Err(DataError::InvalidTask(format!(
                "score table has {} entries, expected {}",
                scores.len(),
                rows * vocab.size()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(DataError::InvalidTask("scores must be finite".into()));
        }
        if !(score_scale > 0.0 && score_scale.is_finite()) {
            return Err(DataError::InvalidTask(format!("score_scale must be > 0, got {score_scale}")));
        }
        Ok(TaskSpec {
            vocab,
            prompt_len,
            response_len,
            score_window,
            score_scale,
            seed,
            scores,
        })
    }

    pub fn vocab(&self) -> &VocabSpec {
        &self.vocab
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn response_len(&self) -> usize {
        self.response_len
    }

    pub fn score_window(&self) -> usize {
        self.score_window
    }

    pub fn score_scale(&self) -> f64 {
        self.score_scale
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Ground-truth reward: the sum of token scores over the response.
    pub fn reward(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<f64> {
        self.vocab.check(prompt)?;
        self.vocab.check(response)?;
        let v = self.vocab.size();
        let rows = ContextIndexer::new(&self.vocab, self.score_window).response_rows(prompt, response);
        Ok(rows
            .iter()
            .zip(response)
            .map(|(&r, &t)| self.scores[r * v + t as usize])
            .sum())
    }

    /// `key=value` header followed by a `[scores]` block, one row per line.
    pub fn to_text(&self) -> String {
        let v = self.vocab.size();
        let mut out = String::new();
        let _ = writeln!(out, "vocab={v}");
        let _ = writeln!(out, "bos={}", self.vocab.bos());
        let _ = writeln!(out, "eos={}", self.vocab.eos());
        let _ = writeln!(out, "prompt_len={}", self.prompt_len);
        let _ = writeln!(out, "response_len={}", self.response_len);
        let _ = writeln!(out, "score_window={}", self.score_window);
        let _ = writeln!(out, "score_scale={:.16e}", self.score_scale);
        let _ = writeln!(out, "seed={}", self.seed);
        out.push_str("[scores]\n");
        for row in self.scores.chunks(v) {
            let cells: Vec<String> = row.iter().map(|s| format!("{s:.16e}")).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut keys = std::collections::BTreeMap::new();
        let mut scores = Vec::new();
        let mut in_scores = false;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |detail: String| DataError::Parse { line: line_no, detail };
            if line == "[scores]" {
                in_scores = true;
                continue;
            }
            if in_scores {
                for cell in line.split_whitespace() {
                    scores.push(cell.parse::<f64>().map_err(|e| err(format!("bad score `{cell}`: {e}")))?);
                }
            } else {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| err(format!("expected key=value, got `{line}`")))?;
                keys.insert(k.trim().to_string(), (line_no, v.trim().to_string()));
            }
        }
        fn get<T: std::str::FromStr>(
            keys: &std::collections::BTreeMap<String, (usize, String)>,
            key: &str,
        ) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            let (line, v) = keys
                .get(key)
                .ok_or_else(|| DataError::InvalidTask(format!("missing key `{key}`")))?;
            v.parse().map_err(|e| DataError::Parse {
                line: *line,
                detail: format!("bad value for `{key}`: {e}"),
            })
        }
        let vocab = VocabSpec::new(get(&keys, "vocab")?, get(&keys, "bos")?, get(&keys, "eos")?)?;
        TaskSpec::new(
            vocab,
            get(&keys, "prompt_len")?,
            get(&keys, "response_len")?,
            get(&keys, "score_window")?,
            get(&keys, "score_scale")?,
            get(&keys, "seed")?,
            scores,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        TaskSpec::parse(&fs::read_to_string(path).map_err(io_err(path))?)
    }
}

/// Scores i.i.d. uniform on `[−scale, scale]`; EOS and BOS columns are zero.
pub fn gen_task(seed: u64, params: TaskParams) -> Result<TaskSpec> {
    if params.vocab_size < 3 {
        return Err(DataError::InvalidTask("vocabulary needs at least one content token".into()));
    }
    let vocab = VocabSpec::with_size(params.vocab_size)?;
    if !(params.score_scale > 0.0 && params.score_scale.is_finite()) {
        return Err(DataError::InvalidTask(format!(
            "score_scale must be > 0, got {}",
            params.score_scale
        )));
    }
    if params.score_window == 0 || params.response_len == 0 {
        return Err(DataError::InvalidTask("response_len and score_window must be at least 1".into()));
    }
    let v = vocab.size();
    let rows = v
        .checked_pow(params.score_window as u32)
        .filter(|r| r.saturating_mul(v) <= 1 << 24)
        .ok_or_else(|| DataError::InvalidTask("score table too large".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = params.score_scale;
    let scores = (0..rows * v)
        .map(|k| {
            let tok = (k % v) as TokenId;
            let draw = rng.random_range(-s..=s);
            if tok == vocab.eos() || tok == vocab.bos() {
                0.0
            } else {
                draw
            }
        })
        .collect();
    TaskSpec::new(
        vocab,
        params.prompt_len,
        params.response_len,
        params.score_window,
        s,
        seed,
        scores,
    )
}

/// Probability that the first of two responses is labeled chosen.
pub fn bt_probability(r1: f64, r2: f64) -> f64 {
    sigmoid(r1 - r2)
}

/// Draws a Bradley-Terry label; `true` means the first response is chosen.
pub fn bt_label<R: Rng + ?Sized>(r1: f64, r2: f64, rng: &mut R) -> bool {
    rng.random::<f64>() < bt_probability(r1, r2)
}

/// Ordered set of preference records.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pairs: Vec<PreferencePair>,
}

impl Dataset {
    pub fn new(pairs: Vec<PreferencePair>) -> Self {
        Dataset { pairs }
    }

    pub fn pairs(&self) -> &[PreferencePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// One `prompt|chosen|rejected` line per record.
    pub fn to_text(&self) -> String {
        let ids = |s: &[TokenId]| s.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
        let mut out = String::new();
        for p in &self.pairs {
            let _ = writeln!(out, "{}|{}|{}", ids(p.prompt()), ids(p.chosen()), ids(p.rejected()));
        }
        out
    }

    pub fn parse(text: &str, vocab: &VocabSpec) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
                continue;
            }
            let err = |detail: String| DataError::Parse { line, detail };
            let fields: Vec<&str> = raw.split('|').collect();
            if fields.len() != 3 {
                return Err(err(format!("expected 3 `|`-separated fields, got {}", fields.len())));
            }
            let mut seqs = Vec::with_capacity(3);
            for f in fields {
                let seq = f
                    .split_whitespace()
                    .map(|t| t.parse::<TokenId>().map_err(|e| err(format!("bad token id `{t}`: {e}"))))
                    .collect::<Result<Vec<_>>>()?;
                seqs.push(seq);
            }
            let rejected = seqs.pop().expect("three fields");
            let chosen = seqs.pop().expect("three fields");
            let prompt = seqs.pop().expect("three fields");
            let pair = PreferencePair::new(prompt, chosen, rejected, vocab).map_err(|e| match e {
                LossError::Policy(p) => err(p.to_string()),
                other => err(other.to_string()),
            })?;
            pairs.push(pair);
        }
        Ok(Dataset { pairs })
    }
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    fs::write(path, data.to_text()).map_err(io_err(path))
}

pub fn read_dataset(path: &Path, vocab: &VocabSpec) -> Result<Dataset> {
    Dataset::parse(&fs::read_to_string(path).map_err(io_err(path))?, vocab)
}

/// Side information for one sampled record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordInfo {
    pub chosen_reward: f64,
    pub rejected_reward: f64,
    pub chosen_truncated: bool,
    pub rejected_truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub dataset: Dataset,
    pub info: Vec<RecordInfo>,
}

impl Generated {
    pub fn truncation_rate(&self) -> f64 {
        if self.info.is_empty() {
            return 0.0;
        }
        let n: usize = self
            .info
            .iter()
            .map(|r| r.chosen_truncated as usize + r.rejected_truncated as usize)
            .sum();
        n as f64 / (2 * self.info.len()) as f64
    }
}

/// Generator for record `index`, independent of every other record.
pub fn record_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Samples `n_pairs` labeled records from `reference`.
pub fn sample_dataset(
    task: &TaskSpec,
    reference: &TabularPolicy,
    n_pairs: usize,
    seed: u64,
) -> Result<Generated> {
    if reference.vocab() != task.vocab() {
        return Err(DataError::VocabMismatch);
    }
    let content: Vec<TokenId> = task.vocab.content_tokens().collect();
    if content.is_empty() && task.prompt_len > 0 {
        return Err(DataError::InvalidTask("no content tokens for prompts".into()));
    }
    const MAX_REDRAWS: usize = 1000;
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut info = Vec::with_capacity(n_pairs);
    for index in 0..n_pairs {
        let mut rng = record_rng(seed, index as u64);
        let prompt: Vec<TokenId> = (0..task.prompt_len)
            .map(|_| content[rng.random_range(0..content.len())])
            .collect();
        let mut drawn = None;
        for _ in 0..MAX_REDRAWS {
            let a = reference.sample_response(&prompt, task.response_len, &mut rng)?;
            let b = reference.sample_response(&prompt, task.response_len, &mut rng)?;
            if a.0 != b.0 {
                drawn = Some((a, b));
                break;
            }
        }
        let ((ya, ta), (yb, tb)) = drawn.ok_or(DataError::Degenerate(index))?;
        let ra = task.reward(&prompt, &ya)?;
        let rb = task.reward(&prompt, &yb)?;
        let (chosen, rejected, rec) = if bt_label(ra, rb, &mut rng) {
            (ya, yb, RecordInfo { chosen_reward: ra, rejected_reward: rb, chosen_truncated: ta, rejected_truncated: tb })
        } else {
            (yb, ya, RecordInfo { chosen_reward: rb, rejected_reward: ra, chosen_truncated: tb, rejected_truncated: ta })
        };
        let pair = PreferencePair::new(prompt, chosen, rejected, task.vocab())
            .map_err(|e| DataError::InvalidTask(e.to_string()))?;
        pairs.push(pair);
        info.push(rec);
    }
    Ok(Generated {
        dataset: Dataset::new(pairs),
        info,
    })
}

/// Everything needed to build a synthetic task, its reference policy and a
/// dataset from one seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub task: TaskParams,
    /// Context window `k` of the reference policy.
    pub policy_window: usize,
    /// Standard deviation of the reference logits.
    pub ref_scale: f64,
    /// Added to the EOS logit of the reference.
    pub eos_bias: f64,
    pub n_pairs: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            task: TaskParams::default(),
            policy_window: 2,
            ref_scale: 1.0,
            eos_bias: 1.0,
            n_pairs: 5000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub task: TaskSpec,
    pub reference: TabularPolicy,
    pub data: Generated,
}

/// Task, frozen reference and dataset, each drawn from its own sub-seed.
pub fn build_synthetic(seed: u64, cfg: &SyntheticConfig) -> Result<Synthetic> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let (task_seed, ref_seed, data_seed): (u64, u64, u64) = (master.random(), master.random(), master.random());
    let task = gen_task(task_seed, cfg.task)?;
    let mut ref_rng = ChaCha8Rng::seed_from_u64(ref_seed);
    let reference =
        TabularPolicy::random(*task.vocab(), cfg.policy_window, cfg.ref_scale, cfg.eos_bias, &mut ref_rng)?
            .clone_frozen();
    let data = sample_dataset(&task, &reference, cfg.n_pairs, data_seed)?;
    Ok(Synthetic { task, reference, data })
}
