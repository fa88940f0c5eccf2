//! Preference losses: DPO, TDPO₁/₂ and their risk-aware generalizations.
//!
//! All losses are built from three quantities of a preference pair
//! `(x, y_w, y_l)`:
//!
//! * `u`: the β-weighted difference of policy/reference log-ratios of the
//!   chosen and rejected responses;
//! * `D(x, y)`: the sequential risk ratio, a sum over response positions of
//!   a risk aggregate (under the reference next-token distribution) of
//!   `log π_ref − log π_θ`;
//! * `δ = β D(y_l) − β D(y_w)` and its stop-gradient variant
//!   `δ₂ = β D(y_l) − sg(β D(y_w))`.
//!
//! With the neutral measure `D` is the sequential forward KL and the risk-aware
//! losses coincide with TDPO through a shared code path.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::diff::{log_sigmoid, DiffError, GradVector, Graph, KahanSum, NodeRef};
use crate::policy::{ParamHandle, PolicyError, TabularPolicy, TokenId, VocabSpec};
use crate::risk::{self, Categorical, RiskError, RiskMeasureSpec};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Graph(#[from] DiffError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error("invalid preference pair: {0}")]
    InvalidPair(String),
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error("reference policy must be frozen")]
    ReferenceNotFrozen,
    #[error("policy and reference use different vocabularies")]
    VocabMismatch,
    #[error("empty batch")]
    EmptyBatch,
}

pub type Result<T> = std::result::Result<T, LossError>;

/// One `(prompt, chosen, rejected)` record.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PreferencePair {
    prompt: Vec<TokenId>,
    chosen: Vec<TokenId>,
    rejected: Vec<TokenId>,
}

impl PreferencePair {
    pub fn new(
        prompt: Vec<TokenId>,
        chosen: Vec<TokenId>,
        rejected: Vec<TokenId>,
        vocab: &VocabSpec,
    ) -> Result<Self> {
        for seq in [&prompt, &chosen, &rejected] {
            vocab.check(seq)?;
        }
        for (name, seq) in [("chosen", &chosen), ("rejected", &rejected)] {
            if seq.last() != Some(&vocab.eos()) {
                return Err(LossError::InvalidPair(format!("{name} response must end with EOS")));
            }
        }
        if chosen == rejected {
            return Err(LossError::InvalidPair("chosen and rejected are identical".into()));
        }
        Ok(PreferencePair {
            prompt,
            chosen,
            rejected,
        })
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.prompt
    }

    pub fn chosen(&self) -> &[TokenId] {
        &self.chosen
    }

    pub fn rejected(&self) -> &[TokenId] {
        &self.rejected
    }

    /// The same record with the preference label flipped.
    pub fn swapped(&self) -> PreferencePair {
        PreferencePair {
            prompt: self.prompt.clone(),
            chosen: self.rejected.clone(),
            rejected: self.chosen.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    Dpo,
    Tdpo1,
    Tdpo2 { alpha: f64 },
    RaDpo1 { measure: RiskMeasureSpec },
    RaDpo2 { alpha: f64, measure: RiskMeasureSpec },
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Dpo => "dpo",
            LossKind::Tdpo1 => "tdpo1",
            LossKind::Tdpo2 { .. } => "tdpo2",
            LossKind::RaDpo1 { .. } => "radpo1",
            LossKind::RaDpo2 { .. } => "radpo2",
        }
    }

    /// Measure used for the sequential risk ratio (neutral unless risk-aware).
    pub fn measure(&self) -> RiskMeasureSpec {
        match self {
            LossKind::RaDpo1 { measure } | LossKind::RaDpo2 { measure, .. } => *measure,
            _ => RiskMeasureSpec::neutral(),
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match self {
            LossKind::Tdpo2 { alpha } | LossKind::RaDpo2 { alpha, .. } => Some(*alpha),
            _ => None,
        }
    }

    /// Builds a kind from its name plus the optional α and measure, rejecting
    /// parameters the kind does not use and requiring those it does.
    pub fn from_parts(
        name: &str,
        alpha: Option<f64>,
        measure: Option<RiskMeasureSpec>,
    ) -> Result<Self> {
        let name = name.to_ascii_lowercase();
        let wants_alpha = matches!(name.as_str(), "tdpo2" | "radpo2");
        let wants_measure = matches!(name.as_str(), "radpo1" | "radpo2");
        if !matches!(name.as_str(), "dpo" | "tdpo1" | "tdpo2" | "radpo1" | "radpo2") {
            return Err(LossError::Config(format!("unknown loss `{name}`")));
        }
        match (wants_alpha, alpha) {
            (true, None) => return Err(LossError::Config(format!("{name} requires alpha"))),
            (false, Some(_)) => return Err(LossError::Config(format!("{name} does not take alpha"))),
            (_, Some(a)) if !(a >= 0.0 && a.is_finite()) => {
                return Err(LossError::Config(format!("alpha must be >= 0, got {a}")))
            }
            _ => {}
        }
        match (wants_measure, measure) {
            (true, None) => return Err(LossError::Config(format!("{name} requires a risk measure"))),
            (false, Some(_)) => {
                return Err(LossError::Config(format!("{name} does not take a risk measure")))
            }
            _ => {}
        }
        Ok(match name.as_str() {
            "dpo" => LossKind::Dpo,
            "tdpo1" => LossKind::Tdpo1,
            "tdpo2" => LossKind::Tdpo2 {
                alpha: alpha.unwrap(),
            },
            "radpo1" => LossKind::RaDpo1 {
                measure: measure.unwrap(),
            },
            _ => LossKind::RaDpo2 {
                alpha: alpha.unwrap(),
                measure: measure.unwrap(),
            },
        })
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::Dpo | LossKind::Tdpo1 => write!(f, "{}", self.name()),
            LossKind::Tdpo2 { alpha } => write!(f, "tdpo2(alpha={alpha})"),
            LossKind::RaDpo1 { measure } => write!(f, "radpo1({measure})"),
            LossKind::RaDpo2 { alpha, measure } => write!(f, "radpo2(alpha={alpha}, {measure})"),
        }
    }
}

impl FromStr for LossKind {
    type Err = LossError;

    /// Parses parameterless kinds only (`dpo`, `tdpo1`).
    fn from_str(s: &str) -> Result<Self> {
        LossKind::from_parts(s, None, None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub beta: f64,
    /// β used inside δ/δ₂; `None` shares `beta`.
    pub delta_beta: Option<f64>,
}

impl LossConfig {
    pub fn new(kind: LossKind, beta: f64) -> Result<Self> {
        let cfg = LossConfig {
            kind,
            beta,
            delta_beta: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(LossError::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        if let Some(b) = self.delta_beta {
            if !(b > 0.0 && b.is_finite()) {
                return Err(LossError::Config(format!("delta_beta must be > 0, got {b}")));
            }
        }
        Ok(())
    }

    pub fn delta_beta(&self) -> f64 {
        self.delta_beta.unwrap_or(self.beta)
    }
}

/// Detached per-pair quantities for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PairDiagnostics {
    pub u: f64,
    pub seqkl_chosen: f64,
    pub seqkl_rejected: f64,
    pub seqrr_chosen: f64,
    pub seqrr_rejected: f64,
    pub loss: f64,
}

/// The trained policy (optionally registered in a graph) and its frozen
/// reference.
#[derive(Debug, Clone, Copy)]
pub struct PolicyPair<'a> {
    theta: &'a TabularPolicy,
    handle: Option<ParamHandle>,
    reference: &'a TabularPolicy,
}

impl<'a> PolicyPair<'a> {
    /// Registers `theta` as the differentiable leaf of `graph`.
    pub fn trainable(
        graph: &mut Graph,
        theta: &'a TabularPolicy,
        reference: &'a TabularPolicy,
    ) -> Result<Self> {
        Self::check(theta, reference)?;
        let handle = theta.register(graph)?;
        Ok(PolicyPair {
            theta,
            handle: Some(handle),
            reference,
        })
    }

    /// `theta` enters the graph as constants.
    pub fn detached(theta: &'a TabularPolicy, reference: &'a TabularPolicy) -> Result<Self> {
        Self::check(theta, reference)?;
        Ok(PolicyPair {
            theta,
            handle: None,
            reference,
        })
    }

    fn check(theta: &TabularPolicy, reference: &TabularPolicy) -> Result<()> {
        if !reference.is_frozen() {
            return Err(LossError::ReferenceNotFrozen);
        }
        if theta.vocab() != reference.vocab() {
            return Err(LossError::VocabMismatch);
        }
        Ok(())
    }

    pub fn theta(&self) -> &TabularPolicy {
        self.theta
    }

    pub fn reference(&self) -> &TabularPolicy {
        self.reference
    }
}

/// Per-position graph nodes for one response.
struct ResponseTerms {
    theta_lp: Vec<NodeRef>,
    ref_lp: Vec<Vec<f64>>,
    tokens: Vec<usize>,
}

fn response_terms(
    graph: &mut Graph,
    pp: &PolicyPair<'_>,
    prompt: &[TokenId],
    response: &[TokenId],
) -> Result<ResponseTerms> {
    let vocab = pp.theta.vocab();
    vocab.check(prompt)?;
    vocab.check(response)?;
    if response.last() != Some(&vocab.eos()) {
        return Err(PolicyError::MissingEos.into());
    }
    let theta_rows = pp.theta.indexer().response_rows(prompt, response);
    let ref_rows = pp.reference.indexer().response_rows(prompt, response);
    let mut theta_lp = Vec::with_capacity(response.len());
    for &r in &theta_rows {
        theta_lp.push(pp.theta.row_logprobs_node(graph, pp.handle.as_ref(), r)?);
    }
    Ok(ResponseTerms {
        theta_lp,
        ref_lp: ref_rows.iter().map(|&r| pp.reference.row_logprobs(r)).collect(),
        tokens: response.iter().map(|&t| t as usize).collect(),
    })
}

/// `log π_θ(y|x) − log π_ref(y|x)` as a node.
fn log_ratio_node(graph: &mut Graph, terms: &ResponseTerms) -> Result<NodeRef> {
    let mut theta_terms = Vec::with_capacity(terms.tokens.len());
    let mut ref_terms = Vec::with_capacity(terms.tokens.len());
    for ((lp, rlp), &tok) in terms.theta_lp.iter().zip(&terms.ref_lp).zip(&terms.tokens) {
        theta_terms.push(graph.gather(*lp, tok)?);
        let r = graph.constant(rlp)?;
        ref_terms.push(graph.gather(r, tok)?);
    }
    let theta_sum = graph.sum_scalars(&theta_terms)?;
    let ref_sum = graph.sum_scalars(&ref_terms)?;
    Ok(graph.sub(theta_sum, ref_sum)?)
}

fn seq_rr_node(
    graph: &mut Graph,
    terms: &ResponseTerms,
    measure: RiskMeasureSpec,
) -> Result<NodeRef> {
    let mut per_position = Vec::with_capacity(terms.tokens.len());
    for (lp, rlp) in terms.theta_lp.iter().zip(&terms.ref_lp) {
        let r = graph.constant(rlp)?;
        let values = graph.sub(r, *lp)?;
        let probs: Vec<f64> = rlp.iter().map(|l| l.exp()).collect();
        per_position.push(risk::penalty_aggregate_node(graph, measure, &probs, values)?);
    }
    Ok(graph.sum_scalars(&per_position)?)
}

/// Implicit reward margin `u(x, y_w, y_l)`.
pub fn margin_u(
    graph: &mut Graph,
    pp: &PolicyPair<'_>,
    pair: &PreferencePair,
    beta: f64,
) -> Result<NodeRef> {
    let w = response_terms(graph, pp, &pair.prompt, &pair.chosen)?;
    let l = response_terms(graph, pp, &pair.prompt, &pair.rejected)?;
    margin_from_terms(graph, &w, &l, beta)
}

fn margin_from_terms(
    graph: &mut Graph,
    chosen: &ResponseTerms,
    rejected: &ResponseTerms,
    beta: f64,
) -> Result<NodeRef> {
    let rw = log_ratio_node(graph, chosen)?;
    let rl = log_ratio_node(graph, rejected)?;
    let diff = graph.sub(rw, rl)?;
    Ok(graph.scale(diff, beta)?)
}

/// Sequential risk ratio `D(x, y; π_ref | π_θ)`, including the EOS position.
pub fn d_seq_rr(
    graph: &mut Graph,
    pp: &PolicyPair<'_>,
    prompt: &[TokenId],
    response: &[TokenId],
    measure: RiskMeasureSpec,
) -> Result<NodeRef> {
    let terms = response_terms(graph, pp, prompt, response)?;
    seq_rr_node(graph, &terms, measure)
}

/// Sequential KL `Σ_t KL(π_ref(·|ctx_t) ‖ π_θ(·|ctx_t))`.
pub fn d_seq_kl(
    graph: &mut Graph,
    pp: &PolicyPair<'_>,
    prompt: &[TokenId],
    response: &[TokenId],
) -> Result<NodeRef> {
    d_seq_rr(graph, pp, prompt, response, RiskMeasureSpec::neutral())
}

/// Loss node and detached diagnostics for one pair.
pub fn pair_loss(
    graph: &mut Graph,
    pp: &PolicyPair<'_>,
    pair: &PreferencePair,
    config: &LossConfig,
) -> Result<(NodeRef, PairDiagnostics)> {
    config.validate()?;
    let w = response_terms(graph, pp, &pair.prompt, &pair.chosen)?;
    let l = response_terms(graph, pp, &pair.prompt, &pair.rejected)?;
    let u = margin_from_terms(graph, &w, &l, config.beta)?;
    let db = config.delta_beta();

    let (stop_chosen, alpha, measure) = match config.kind {
        LossKind::Dpo => (false, 0.0, None),
        LossKind::Tdpo1 => (false, 1.0, Some(RiskMeasureSpec::neutral())),
        LossKind::RaDpo1 { measure } => (false, 1.0, Some(measure)),
        LossKind::Tdpo2 { alpha } => (true, alpha, Some(RiskMeasureSpec::neutral())),
        LossKind::RaDpo2 { alpha, measure } => (true, alpha, Some(measure)),
    };

    let logit = match measure {
        None => u,
        Some(m) => {
            let dl = seq_rr_node(graph, &l, m)?;
            let dw = seq_rr_node(graph, &w, m)?;
            let dl = graph.scale(dl, db)?;
            let mut dw = graph.scale(dw, db)?;
            if stop_chosen {
                dw = graph.stop_gradient(dw)?;
            }
            let delta = graph.sub(dl, dw)?;
            let weighted = if stop_chosen { graph.scale(delta, alpha)? } else { delta };
            graph.sub(u, weighted)?
        }
    };
    let ls = graph.log_sigmoid(logit)?;
    let loss = graph.neg(ls)?;

    let diag = diagnostics(pp.theta, pp.reference, pair, config, graph.scalar(loss))?;
    Ok((loss, diag))
}

/// Detached diagnostics, computed without the graph.
pub fn diagnostics(
    theta: &TabularPolicy,
    reference: &TabularPolicy,
    pair: &PreferencePair,
    config: &LossConfig,
    loss: f64,
) -> Result<PairDiagnostics> {
    let measure = config.kind.measure();
    Ok(PairDiagnostics {
        u: margin_value(theta, reference, pair, config.beta)?,
        seqkl_chosen: seq_kl_value(theta, reference, &pair.prompt, &pair.chosen)?,
        seqkl_rejected: seq_kl_value(theta, reference, &pair.prompt, &pair.rejected)?,
        seqrr_chosen: seq_rr_value(theta, reference, &pair.prompt, &pair.chosen, measure)?,
        seqrr_rejected: seq_rr_value(theta, reference, &pair.prompt, &pair.rejected, measure)?,
        loss,
    })
}

/// `u` evaluated from four plain sequence log-probabilities.
pub fn margin_value(
    theta: &TabularPolicy,
    reference: &TabularPolicy,
    pair: &PreferencePair,
    beta: f64,
) -> Result<f64> {
    let rw = theta.seq_logprob(&pair.prompt, &pair.chosen)?
        - reference.seq_logprob(&pair.prompt, &pair.chosen)?;
    let rl = theta.seq_logprob(&pair.prompt, &pair.rejected)?
        - reference.seq_logprob(&pair.prompt, &pair.rejected)?;
    Ok(beta * rw - beta * rl)
}

/// Plain-float sequential risk ratio.
pub fn seq_rr_value(
    theta: &TabularPolicy,
    reference: &TabularPolicy,
    prompt: &[TokenId],
    response: &[TokenId],
    measure: RiskMeasureSpec,
) -> Result<f64> {
    theta.vocab().check(prompt)?;
    theta.vocab().check(response)?;
    let theta_rows = theta.indexer().response_rows(prompt, response);
    let ref_rows = reference.indexer().response_rows(prompt, response);
    let mut total = KahanSum::default();
    for (&tr, &rr) in theta_rows.iter().zip(&ref_rows) {
        let tlp = theta.row_logprobs(tr);
        let rlp = reference.row_logprobs(rr);
        let dist = Categorical::new(
            rlp.iter().map(|l| l.exp()).collect(),
            rlp.iter().zip(&tlp).map(|(r, t)| r - t).collect(),
        )?;
        total.add(risk::penalty_aggregate(measure, &dist)?);
    }
    Ok(total.total())
}

pub fn seq_kl_value(
    theta: &TabularPolicy,
    reference: &TabularPolicy,
    prompt: &[TokenId],
    response: &[TokenId],
) -> Result<f64> {
    seq_rr_value(theta, reference, prompt, response, RiskMeasureSpec::neutral())
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub loss: f64,
    pub grad: GradVector,
    pub diagnostics: PairDiagnostics,
}

/// Mean loss over `pairs`, its exact gradient, and mean diagnostics.
pub fn batch_loss_and_grad(
    theta: &TabularPolicy,
    reference: &TabularPolicy,
    pairs: &[PreferencePair],
    config: &LossConfig,
) -> Result<BatchOutput> {
    if pairs.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let mut graph = Graph::new();
    let pp = PolicyPair::trainable(&mut graph, theta, reference)?;
    let mut losses = Vec::with_capacity(pairs.len());
    let mut diags = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let (node, d) = pair_loss(&mut graph, &pp, pair, config)?;
        losses.push(node);
        diags.push(d);
    }
    let total = graph.sum_scalars(&losses)?;
    let mean = graph.scale(total, 1.0 / pairs.len() as f64)?;
    let grad = graph.backward(mean)?;
    Ok(BatchOutput {
        loss: graph.scalar(mean),
        grad,
        diagnostics: mean_diagnostics(&diags),
    })
}

/// Mean loss only, without building a gradient.
pub fn batch_loss(
    theta: &TabularPolicy,
    reference: &TabularPolicy,
    pairs: &[PreferencePair],
    config: &LossConfig,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let mut graph = Graph::new();
    let pp = PolicyPair::detached(theta, reference)?;
    let mut total = KahanSum::default();
    for pair in pairs {
        let (node, _) = pair_loss(&mut graph, &pp, pair, config)?;
        total.add(graph.scalar(node));
    }
    Ok(total.total() / pairs.len() as f64)
}

pub fn mean_diagnostics(diags: &[PairDiagnostics]) -> PairDiagnostics {
    let n = diags.len().max(1) as f64;
    let mean = |f: fn(&PairDiagnostics) -> f64| diags.iter().map(f).collect::<KahanSum>().total() / n;
    PairDiagnostics {
        u: mean(|d| d.u),
        seqkl_chosen: mean(|d| d.seqkl_chosen),
        seqkl_rejected: mean(|d| d.seqkl_rejected),
        seqrr_chosen: mean(|d| d.seqrr_chosen),
        seqrr_rejected: mean(|d| d.seqrr_rejected),
        loss: mean(|d| d.loss),
    }
}

/// Per-pair loss as a plain function of the logit `u − δ` (or `u − αδ₂`).
pub fn loss_from_logit(logit: f64) -> f64 {
    -log_sigmoid(logit)
}
