//! Tabular n-gram softmax policies over a small vocabulary.
//!
//! The next-token distribution depends on the last `window` tokens of the
//! concatenated prompt and response prefix, left-padded with BOS. Logits are
//! stored densely as a `V^window x V` table.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::diff::{DiffError, Graph, NodeRef};

pub type TokenId = u32;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid vocabulary: {0}")]
    Vocab(String),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: TokenId, size: usize },
    #[error("invalid policy: {0}")]
    Invalid(String),
    #[error("response must end with EOS")]
    MissingEos,
    #[error("frozen policies cannot be differentiated")]
    Frozen,
    #[error("checkpoint line {line}: {detail}")]
    Checkpoint { line: usize, detail: String },
    #[error(transparent)]
    Graph(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, PolicyError>;

/// Token alphabet, including the reserved BOS and EOS ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VocabSpec {
    size: usize,
    bos: TokenId,
    eos: TokenId,
}

impl VocabSpec {
    pub const MAX_SIZE: usize = 256;

    pub fn new(size: usize, bos: TokenId, eos: TokenId) -> Result<Self> {
        if !(2..=Self::MAX_SIZE).contains(&size) {
            return Err(PolicyError::Vocab(format!(
                "size must be in 2..={}, got {size}",
                Self::MAX_SIZE
            )));
        }
        if bos == eos {
            return Err(PolicyError::Vocab("bos and eos must differ".into()));
        }
        if bos as usize >= size || eos as usize >= size {
            return Err(PolicyError::Vocab("bos and eos must be < size".into()));
        }
        Ok(VocabSpec { size, bos, eos })
    }

    /// Vocabulary with BOS = 0 and EOS = 1.
    pub fn with_size(size: usize) -> Result<Self> {
        Self::new(size, 0, 1)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn bos(&self) -> TokenId {
        self.bos
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    /// Tokens other than BOS and EOS, in increasing order.
    pub fn content_tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.size as TokenId).filter(move |&t| t != self.bos && t != self.eos)
    }

    pub fn check(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|&&t| t as usize >= self.size) {
            Some(&id) => Err(PolicyError::TokenOutOfRange {
                id,
                size: self.size,
            }),
            None => Ok(()),
        }
    }
}

/// Maps a token stream position to its dense context row.
#[derive(Debug, Clone, Copy)]
pub struct ContextIndexer {
    vocab: usize,
    window: usize,
    bos: TokenId,
}

impl ContextIndexer {
    pub fn new(vocab: &VocabSpec, window: usize) -> Self {
        ContextIndexer {
            vocab: vocab.size,
            window,
            bos: vocab.bos,
        }
    }

    pub fn rows(&self) -> usize {
        self.vocab.pow(self.window as u32)
    }

    /// Row for the last `window` tokens of `stream`, BOS-padded on the left.
    pub fn index(&self, stream: &[TokenId]) -> usize {
        let pad = self.window.saturating_sub(stream.len());
        let tail = &stream[stream.len().saturating_sub(self.window)..];
        std::iter::repeat_n(self.bos, pad)
            .chain(tail.iter().copied())
            .fold(0usize, |acc, t| acc * self.vocab + t as usize)
    }

    /// Rows visited while scoring each position of `response` after `prompt`.
    pub fn response_rows(&self, prompt: &[TokenId], response: &[TokenId]) -> Vec<usize> {
        let mut stream = Vec::with_capacity(prompt.len() + response.len());
        stream.extend_from_slice(prompt);
        let mut rows = Vec::with_capacity(response.len());
        for &tok in response {
            rows.push(self.index(&stream));
            stream.push(tok);
        }
        rows
    }
}

/// Where an unfrozen policy's logits live inside a [`Graph`].
#[derive(Debug, Clone, Copy)]
pub struct ParamHandle {
    leaf: NodeRef,
}

impl ParamHandle {
    pub fn leaf(&self) -> NodeRef {
        self.leaf
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    vocab: VocabSpec,
    window: usize,
    logits: Vec<f64>,
    frozen: bool,
}

pub(crate) fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

impl TabularPolicy {
    /// All-zero logits: every next-token distribution is uniform.
    pub fn uniform(vocab: VocabSpec, window: usize) -> Result<Self> {
        Self::check_window(&vocab, window)?;
        let rows = vocab.size.pow(window as u32);
        Ok(TabularPolicy {
            vocab,
            window,
            logits: vec![0.0; rows * vocab.size],
            frozen: false,
        })
    }

    pub fn from_logits(vocab: VocabSpec, window: usize, logits: Vec<f64>) -> Result<Self> {
        Self::check_window(&vocab, window)?;
        let expected = vocab.size.pow(window as u32) * vocab.size;
        if logits.len() != expected {
            return Err(PolicyError::Invalid(format!(
                "expected {expected} logits, got {}",
                logits.len()
            )));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(PolicyError::Invalid("logits must be finite".into()));
        }
        Ok(TabularPolicy {
            vocab,
            window,
            logits,
            frozen: false,
        })
    }

    /// Gaussian logits with standard deviation `scale`. EOS gets `eos_bias`
    /// added and BOS is pushed far down so it is practically never emitted.
    pub fn random<R: Rng + ?Sized>(
        vocab: VocabSpec,
        window: usize,
        scale: f64,
        eos_bias: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut policy = Self::uniform(vocab, window)?;
        let v = vocab.size;
        for (i, l) in policy.logits.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(rng);
            *l = scale * z;
            let tok = (i % v) as TokenId;
            if tok == vocab.eos {
                *l += eos_bias;
            } else if tok == vocab.bos {
                *l = -30.0;
            }
        }
        Ok(policy)
    }

    fn check_window(vocab: &VocabSpec, window: usize) -> Result<()> {
        if window == 0 {
            return Err(PolicyError::Invalid("window must be at least 1".into()));
        }
        match vocab.size.checked_pow(window as u32) {
            Some(rows) if rows.saturating_mul(vocab.size) <= 1 << 24 => Ok(()),
            _ => Err(PolicyError::Invalid(format!(
                "table V^k x V too large for V={} k={window}",
                vocab.size
            ))),
        }
    }

    pub fn vocab(&self) -> &VocabSpec {
        &self.vocab
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn param_count(&self) -> usize {
        self.logits.len()
    }

    /// Mutable access for optimizers.
    pub fn logits_mut(&mut self) -> Result<&mut [f64]> {
        if self.frozen {
            return Err(PolicyError::Frozen);
        }
        Ok(&mut self.logits)
    }

    pub fn indexer(&self) -> ContextIndexer {
        ContextIndexer::new(&self.vocab, self.window)
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let v = self.vocab.size;
        &self.logits[row * v..(row + 1) * v]
    }

    /// Deep copy that is marked frozen.
    pub fn clone_frozen(&self) -> TabularPolicy {
        TabularPolicy {
            frozen: true,
            ..self.clone()
        }
    }

    /// Deep copy that can be trained.
    pub fn clone_trainable(&self) -> TabularPolicy {
        TabularPolicy {
            frozen: false,
            ..self.clone()
        }
    }

    /// Registers the logits as differentiable leaves of `graph`.
    pub fn register(&self, graph: &mut Graph) -> Result<ParamHandle> {
        if self.frozen {
            return Err(PolicyError::Frozen);
        }
        Ok(ParamHandle {
            leaf: graph.leaf(&self.logits)?,
        })
    }

    /// Log-probabilities of the next token after `context`.
    pub fn next_logprobs(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        self.vocab.check(context)?;
        Ok(self.row_logprobs(self.indexer().index(context)))
    }

    pub fn row_logprobs(&self, row: usize) -> Vec<f64> {
        log_softmax(self.row(row))
    }

    /// Next-token log-probabilities as a graph node. With a handle the node
    /// is differentiable in this policy's logits, otherwise it is constant.
    pub fn next_logprobs_node(
        &self,
        graph: &mut Graph,
        handle: Option<&ParamHandle>,
        context: &[TokenId],
    ) -> Result<NodeRef> {
        self.vocab.check(context)?;
        self.row_logprobs_node(graph, handle, self.indexer().index(context))
    }

    pub fn row_logprobs_node(
        &self,
        graph: &mut Graph,
        handle: Option<&ParamHandle>,
        row: usize,
    ) -> Result<NodeRef> {
        match handle {
            Some(h) => {
                let v = self.vocab.size;
                let logits = graph.slice(h.leaf, row * v, v)?;
                Ok(graph.log_softmax(logits)?)
            }
            None => Ok(graph.constant(&self.row_logprobs(row))?),
        }
    }

    fn check_response(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<()> {
        self.vocab.check(prompt)?;
        self.vocab.check(response)?;
        if response.last() != Some(&self.vocab.eos) {
            return Err(PolicyError::MissingEos);
        }
        Ok(())
    }

    /// `log π(response | prompt)`.
    pub fn seq_logprob(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<f64> {
        self.check_response(prompt, response)?;
        let rows = self.indexer().response_rows(prompt, response);
        Ok(rows
            .iter()
            .zip(response)
            .map(|(&r, &tok)| self.row_logprobs(r)[tok as usize])
            .sum())
    }

    pub fn seq_logprob_node(
        &self,
        graph: &mut Graph,
        handle: Option<&ParamHandle>,
        prompt: &[TokenId],
        response: &[TokenId],
    ) -> Result<NodeRef> {
        self.check_response(prompt, response)?;
        let rows = self.indexer().response_rows(prompt, response);
        let mut terms = Vec::with_capacity(rows.len());
        for (&r, &tok) in rows.iter().zip(response) {
            let lp = self.row_logprobs_node(graph, handle, r)?;
            terms.push(graph.gather(lp, tok as usize)?);
        }
        Ok(graph.sum_scalars(&terms)?)
    }

    /// Ancestral sampling after `prompt` until EOS or `max_len` tokens. When
    /// the limit is hit the final token is replaced by EOS and the second
    /// return value is `true`.
    pub fn sample_response<R: Rng + ?Sized>(
        &self,
        prompt: &[TokenId],
        max_len: usize,
        rng: &mut R,
    ) -> Result<(Vec<TokenId>, bool)> {
        self.vocab.check(prompt)?;
        if max_len == 0 {
            return Err(PolicyError::Invalid("max_len must be at least 1".into()));
        }
        let indexer = self.indexer();
        let mut stream = prompt.to_vec();
        let mut response = Vec::new();
        loop {
            let probs: Vec<f64> = self
                .row_logprobs(indexer.index(&stream))
                .iter()
                .map(|l| l.exp())
                .collect();
            let tok = sample_index(&probs, rng) as TokenId;
            if response.len() + 1 == max_len && tok != self.vocab.eos {
                response.push(self.vocab.eos);
                return Ok((response, true));
            }
            response.push(tok);
            if tok == self.vocab.eos {
                return Ok((response, false));
            }
            stream.push(tok);
        }
    }

    /// Text checkpoint: a `V k` header, a `# bos=B eos=E` line, then one line
    /// of V logits per context row in 17-significant-digit scientific form.
    pub fn to_checkpoint_string(&self) -> String {
        let v = self.vocab.size;
        let mut out = String::with_capacity(self.logits.len() * 25);
        let _ = writeln!(out, "{} {}", v, self.window);
        let _ = writeln!(out, "# bos={} eos={}", self.vocab.bos, self.vocab.eos);
        for row in self.logits.chunks(v) {
            let line: Vec<String> = row.iter().map(|x| format!("{x:.16e}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn parse_checkpoint(text: &str) -> Result<Self> {
        let err = |line: usize, detail: String| PolicyError::Checkpoint { line, detail };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let (hline, header) = lines
            .find(|(_, l)| !l.is_empty() && !l.starts_with('#'))
            .ok_or_else(|| err(1, "missing `V k` header".into()))?;
        let nums: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| err(hline, format!("bad header: {e}")))?;
        let [v, k] = nums[..] else {
            return Err(err(hline, "header must be `V k`".into()));
        };
        let (mut bos, mut eos) = (0, 1);
        let mut logits = Vec::new();
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                for kv in meta.split_whitespace() {
                    match kv.split_once('=') {
                        Some(("bos", x)) => {
                            bos = x.parse().map_err(|e| err(n, format!("bad bos: {e}")))?
                        }
                        Some(("eos", x)) => {
                            eos = x.parse().map_err(|e| err(n, format!("bad eos: {e}")))?
                        }
                        _ => {}
                    }
                }
                continue;
            }
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| err(n, format!("bad logit: {e}")))?;
            if row.len() != v {
                return Err(err(n, format!("expected {v} logits, got {}", row.len())));
            }
            logits.extend(row);
        }
        let vocab = VocabSpec::new(v, bos, eos)?;
        TabularPolicy::from_logits(vocab, k, logits)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_checkpoint(&std::fs::read_to_string(path)?)
    }
}

/// Inverse-CDF draw from a normalized probability vector.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the final cumulative sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab(v: usize) -> VocabSpec {
        VocabSpec::with_size(v).unwrap()
    }

    fn random_policy(v: usize, k: usize, seed: u64) -> TabularPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TabularPolicy::random(vocab(v), k, 1.5, 0.5, &mut rng).unwrap()
    }

    /// Independent softmax: normalizes probabilities, then takes the log.
    fn independent_logprob(logits: &[f64], tok: usize) -> f64 {
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        (logits[tok].exp() / z).ln()
    }

    #[test]
    fn vocab_validation() {
        assert!(VocabSpec::new(1, 0, 1).is_err());
        assert!(VocabSpec::new(257, 0, 1).is_err());
        assert!(VocabSpec::new(4, 2, 2).is_err());
        assert!(VocabSpec::new(4, 0, 4).is_err());
        let v = vocab(5);
        assert_eq!(v.content_tokens().collect::<Vec<_>>(), vec![2, 3, 4]);
    }

    #[test]
    fn uniform_policy_is_uniform() {
        let p = TabularPolicy::uniform(vocab(6), 2).unwrap();
        let lp = p.next_logprobs(&[3, 4, 5]).unwrap();
        for x in lp {
            assert!((x + (6f64).ln()).abs() < 1e-15);
        }
        let empty = p.next_logprobs(&[]).unwrap();
        assert_eq!(empty.len(), 6);
    }

    #[test]
    fn two_token_softmax() {
        let p = TabularPolicy::from_logits(vocab(2), 1, vec![0.0, 3f64.ln(), 0.0, 0.0]).unwrap();
        let lp = p.next_logprobs(&[]).unwrap();
        assert!((lp[0] + 4f64.ln()).abs() < 1e-15);
        assert!((lp[1] - 0.75f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_tokens_rejected() {
        let p = TabularPolicy::uniform(vocab(4), 1).unwrap();
        assert!(matches!(
            p.next_logprobs(&[4]),
            Err(PolicyError::TokenOutOfRange { id: 4, .. })
        ));
        assert!(matches!(p.seq_logprob(&[], &[2, 3]), Err(PolicyError::MissingEos)));
    }

    #[test]
    fn uniform_sequence_logprob() {
        let p = TabularPolicy::uniform(vocab(7), 2).unwrap();
        let lp = p.seq_logprob(&[2, 3], &[4, 5, 6, 1]).unwrap();
        assert!((lp + 4.0 * 7f64.ln()).abs() < 1e-12);
        let single = p.seq_logprob(&[2], &[1]).unwrap();
        assert!((single + 7f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn random_policy_matches_independent_recomputation() {
        let p = random_policy(5, 2, 11);
        let prompt = [2, 3];
        let response = [4, 2, 2, 1];
        let mut stream: Vec<TokenId> = prompt.to_vec();
        let mut expected = 0.0;
        for &tok in &response {
            let n = stream.len();
            let ctx = [stream[n - 2] as usize, stream[n - 1] as usize];
            let row = ctx[0] * 5 + ctx[1];
            expected += independent_logprob(&p.logits()[row * 5..row * 5 + 5], tok as usize);
            stream.push(tok);
        }
        let got = p.seq_logprob(&prompt, &response).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn frozen_clone_is_independent() {
        let mut theta = random_policy(4, 1, 3);
        let frozen = theta.clone_frozen();
        assert!(frozen.is_frozen());
        let before = frozen.seq_logprob(&[2], &[3, 1]).unwrap();
        for _ in 0..100 {
            for l in theta.logits_mut().unwrap() {
                *l += 0.01;
            }
        }
        assert_eq!(frozen.seq_logprob(&[2], &[3, 1]).unwrap().to_bits(), before.to_bits());
        assert_eq!(frozen.clone_frozen(), frozen);
        let mut g = Graph::new();
        assert!(matches!(frozen.register(&mut g), Err(PolicyError::Frozen)));
        let mut f2 = frozen.clone();
        assert!(f2.logits_mut().is_err());
    }

    #[test]
    fn node_route_matches_plain_and_differentiates() {
        let p = random_policy(4, 2, 5);
        let prompt = [2];
        let response = [3, 3, 1];
        let mut g = Graph::new();
        let h = p.register(&mut g).unwrap();
        let node = p.seq_logprob_node(&mut g, Some(&h), &prompt, &response).unwrap();
        assert!((g.scalar(node) - p.seq_logprob(&prompt, &response).unwrap()).abs() < 1e-12);
        let grad = g.backward(node).unwrap();
        // rows never visited receive no gradient
        let rows = p.indexer().response_rows(&prompt, &response);
        for r in 0..16 {
            if !rows.contains(&r) {
                assert!(grad.as_slice()[r * 4..r * 4 + 4].iter().all(|&x| x == 0.0));
            }
        }
        let err = crate::diff::finite_diff_check(
            |g, leaf| {
                let q = TabularPolicy::from_logits(*p.vocab(), 2, g.value(leaf).to_vec()).unwrap();
                let h = ParamHandle { leaf };
                Ok(q.seq_logprob_node(g, Some(&h), &prompt, &response).unwrap())
            },
            p.logits(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let p = random_policy(6, 2, 17);
        let text = p.to_checkpoint_string();
        assert!(text.starts_with("6 2\n"));
        let q = TabularPolicy::parse_checkpoint(&text).unwrap();
        assert_eq!(q.vocab(), p.vocab());
        assert!(p.logits().iter().zip(q.logits()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(q.to_checkpoint_string(), text);
    }

    #[test]
    fn checkpoint_errors_name_the_line() {
        let bad = "3 1\n0 0 0\n0 x 0\n0 0 0\n";
        match TabularPolicy::parse_checkpoint(bad) {
            Err(PolicyError::Checkpoint { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(TabularPolicy::parse_checkpoint("3 1\n0 0 0\n").is_err());
    }

    #[test]
    fn sampling_respects_max_len() {
        let p = TabularPolicy::from_logits(
            vocab(3),
            1,
            // EOS (id 1) never chosen unless forced
            vec![-30.0, -30.0, 5.0, -30.0, -30.0, 5.0, -30.0, -30.0, 5.0],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (resp, truncated) = p.sample_response(&[2], 4, &mut rng).unwrap();
        assert!(truncated);
        assert_eq!(resp, vec![2, 2, 2, 1]);
    }

    proptest! {
        #[test]
        fn distributions_are_normalized(seed in 0u64..1000, ctx in proptest::collection::vec(0u32..6, 0..5)) {
            let p = random_policy(6, 2, seed);
            let total: f64 = p.next_logprobs(&ctx).unwrap().iter().map(|l| l.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn boundary_split_invariance(seed in 0u64..1000, stream in proptest::collection::vec(2u32..6, 1..6), cut in 0usize..6) {
            let p = random_policy(6, 2, seed);
            let mut full = stream.clone();
            full.push(1);
            let cut = cut.min(stream.len());
            // moving the first `cut` response tokens into the prompt
            let a = p.seq_logprob(&[], &full).unwrap();
            let b = p.seq_logprob(&full[..cut], &full[cut..]).unwrap();
            let prefix: f64 = (0..cut).map(|t| p.next_logprobs(&full[..t]).unwrap()[full[t] as usize]).sum();
            prop_assert!((a - (prefix + b)).abs() < 1e-12);
        }
    }
}
