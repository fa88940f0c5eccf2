//! Exhaustive prefix-tree MDP engine and numeric identity checks.
//!
//! A [`TreeMdp`] has deterministic transitions: the state after choosing
//! action `a` in prefix `s` is `s ∘ a`, and every prefix of length `T` is
//! terminal. States are addressed as `(depth, index)` where `index` is the
//! base-`V` number spelled by the actions taken so far.
//!
//! Two value recursions are provided. The stepwise one discounts per-step
//! rewards (`Q = R + γ V(child)`, `V = 0` at terminal states). The augmented
//! one carries the whole discounted return to the leaves (`Q̃ = Ṽ(child)`,
//! `Ṽ = r` at terminal states). Because transitions are deterministic the
//! risk aggregate over next states is the identity, so the measure enters
//! only through the action-risk advantage baseline.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::diff::{log_sum_exp, sigmoid};
use crate::risk::{self, Categorical, RiskError, RiskKind, RiskMeasureSpec};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),
    #[error("invalid policy table: {0}")]
    InvalidPolicy(String),
    #[error("state {0} is not part of the tree")]
    UnknownState(State),
    #[error("action {action} out of range for {vocab} actions")]
    UnknownAction { action: usize, vocab: usize },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Risk(#[from] RiskError),
}

pub type Result<T> = std::result::Result<T, OracleError>;

/// A prefix in the tree: `depth` actions taken, spelled by `index` in base V.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct State {
    pub depth: usize,
    pub index: usize,
}

impl State {
    pub const ROOT: State = State { depth: 0, index: 0 };
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(depth {}, index {})", self.depth, self.index)
    }
}

/// Deterministic prefix-tree MDP with per-step rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeMdp {
    vocab: usize,
    horizon: usize,
    gamma: f64,
    prompt: Vec<u32>,
    /// `rewards[d][i * V + a]` is the reward for action `a` at `(d, i)`.
    rewards: Vec<Vec<f64>>,
}

impl TreeMdp {
    pub fn new(
        vocab: usize,
        horizon: usize,
        gamma: f64,
        prompt: Vec<u32>,
        rewards: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if vocab == 0 || horizon == 0 {
            return Err(OracleError::InvalidMdp("vocab and horizon must be positive".into()));
        }
        if vocab.checked_pow(horizon as u32).is_none_or(|n| n > 1 << 22) {
            return Err(OracleError::InvalidMdp(format!("tree {vocab}^{horizon} too large")));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(OracleError::InvalidMdp(format!("gamma must lie in (0, 1], got {gamma}")));
        }
        if rewards.len() != horizon {
            return Err(OracleError::InvalidMdp(format!(
                "expected {horizon} reward layers, got {}",
                rewards.len()
            )));
        }
        for (d, layer) in rewards.iter().enumerate() {
            if layer.len() != vocab.pow(d as u32 + 1) {
                return Err(OracleError::InvalidMdp(format!("reward layer {d} has wrong size")));
            }
            if layer.iter().any(|r| !r.is_finite()) {
                return Err(OracleError::InvalidMdp(format!("reward layer {d} is not finite")));
            }
        }
        Ok(TreeMdp {
            vocab,
            horizon,
            gamma,
            prompt,
            rewards,
        })
    }

    /// Rewards i.i.d. uniform on `[-1, 1]`.
    pub fn random<R: Rng + ?Sized>(vocab: usize, horizon: usize, gamma: f64, rng: &mut R) -> Result<Self> {
        let rewards = (0..horizon)
            .map(|d| (0..vocab.pow(d as u32 + 1)).map(|_| rng.random_range(-1.0..=1.0)).collect())
            .collect();
        TreeMdp::new(vocab, horizon, gamma, vec![0], rewards)
    }

    pub fn from_fn(
        vocab: usize,
        horizon: usize,
        gamma: f64,
        mut reward: impl FnMut(State, usize) -> f64,
    ) -> Result<Self> {
        let rewards = (0..horizon)
            .map(|d| {
                (0..vocab.pow(d as u32 + 1))
                    .map(|k| reward(State { depth: d, index: k / vocab }, k % vocab))
                    .collect()
            })
            .collect();
        TreeMdp::new(vocab, horizon, gamma, vec![0], rewards)
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn prompt(&self) -> &[u32] {
        &self.prompt
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        TreeMdp::new(self.vocab, self.horizon, gamma, self.prompt.clone(), self.rewards.clone())
    }

    pub fn states_at(&self, depth: usize) -> usize {
        self.vocab.pow(depth as u32)
    }

    pub fn leaf_count(&self) -> usize {
        self.states_at(self.horizon)
    }

    fn check(&self, s: State) -> Result<()> {
        if s.depth > self.horizon || s.index >= self.states_at(s.depth) {
            return Err(OracleError::UnknownState(s));
        }
        Ok(())
    }

    fn check_action(&self, a: usize) -> Result<()> {
        if a >= self.vocab {
            return Err(OracleError::UnknownAction { action: a, vocab: self.vocab });
        }
        Ok(())
    }

    pub fn is_terminal(&self, s: State) -> bool {
        s.depth == self.horizon
    }

    pub fn child(&self, s: State, a: usize) -> State {
        State {
            depth: s.depth + 1,
            index: s.index * self.vocab + a,
        }
    }

    pub fn reward(&self, s: State, a: usize) -> Result<f64> {
        self.check(s)?;
        self.check_action(a)?;
        if self.is_terminal(s) {
            return Err(OracleError::UnknownState(s));
        }
        Ok(self.rewards[s.depth][s.index * self.vocab + a])
    }

    /// Actions spelling leaf `index`, root first.
    pub fn leaf_actions(&self, index: usize) -> Vec<usize> {
        let mut out = vec![0; self.horizon];
        let mut k = index;
        for slot in out.iter_mut().rev() {
            *slot = k % self.vocab;
            k /= self.vocab;
        }
        out
    }

    /// States visited along an action path, root first (excluding the leaf).
    pub fn path_states(&self, actions: &[usize]) -> Vec<State> {
        let mut s = State::ROOT;
        let mut out = Vec::with_capacity(actions.len());
        for &a in actions {
            out.push(s);
            s = self.child(s, a);
        }
        out
    }

    /// Discounted return `Σ_t γ^{t-1} R_t` along a full action path.
    pub fn path_return(&self, actions: &[usize]) -> f64 {
        let mut total = 0.0;
        let mut discount = 1.0;
        for (s, &a) in self.path_states(actions).into_iter().zip(actions) {
            total += discount * self.rewards[s.depth][s.index * self.vocab + a];
            discount *= self.gamma;
        }
        total
    }

    /// Discounted reward accumulated before reaching `s`.
    pub fn prefix_return(&self, s: State) -> f64 {
        let mut actions = Vec::with_capacity(s.depth);
        let mut k = s.index;
        for _ in 0..s.depth {
            actions.push(k % self.vocab);
            k /= self.vocab;
        }
        actions.reverse();
        self.path_return(&actions)
    }
}

/// Per-state action distributions over a [`TreeMdp`]'s nonterminal states.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDist {
    vocab: usize,
    horizon: usize,
    /// `probs[d][i * V + a]`.
    probs: Vec<Vec<f64>>,
}

impl TabularDist {
    pub fn from_fn(mdp: &TreeMdp, mut row: impl FnMut(State) -> Vec<f64>) -> Result<Self> {
        let v = mdp.vocab;
        let mut probs = Vec::with_capacity(mdp.horizon);
        for d in 0..mdp.horizon {
            let mut layer = Vec::with_capacity(mdp.states_at(d + 1));
            for i in 0..mdp.states_at(d) {
                let s = State { depth: d, index: i };
                let r = row(s);
                if r.len() != v {
                    return Err(OracleError::InvalidPolicy(format!("row at {s} has {} entries", r.len())));
                }
                if r.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                    return Err(OracleError::InvalidPolicy(format!("row at {s} is not a distribution")));
                }
                let total: f64 = r.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(OracleError::InvalidPolicy(format!("row at {s} sums to {total}")));
                }
                layer.extend(r);
            }
            probs.push(layer);
        }
        Ok(TabularDist {
            vocab: v,
            horizon: mdp.horizon,
            probs,
        })
    }

    pub fn uniform(mdp: &TreeMdp) -> Self {
        let p = 1.0 / mdp.vocab as f64;
        TabularDist {
            vocab: mdp.vocab,
            horizon: mdp.horizon,
            probs: (0..mdp.horizon).map(|d| vec![p; mdp.states_at(d + 1)]).collect(),
        }
    }

    /// Softmax of i.i.d. `N(0, scale²)` logits at every state.
    pub fn random<R: Rng + ?Sized>(mdp: &TreeMdp, scale: f64, rng: &mut R) -> Self {
        TabularDist::from_fn(mdp, |_| {
            let logits: Vec<f64> = (0..mdp.vocab)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            softmax(&logits)
        })
        .expect("softmax rows are normalized")
    }

    /// Rows given in log space, normalized exactly.
    pub fn from_log_fn(mdp: &TreeMdp, mut row: impl FnMut(State) -> Vec<f64>) -> Result<Self> {
        TabularDist::from_fn(mdp, |s| softmax(&row(s)))
    }

    fn fits(&self, mdp: &TreeMdp) -> Result<()> {
        if self.vocab != mdp.vocab || self.horizon != mdp.horizon {
            return Err(OracleError::InvalidPolicy("table shape does not match the MDP".into()));
        }
        Ok(())
    }

    pub fn row(&self, s: State) -> Result<&[f64]> {
        if s.depth >= self.horizon || s.index * self.vocab >= self.probs[s.depth].len() {
            return Err(OracleError::UnknownState(s));
        }
        let start = s.index * self.vocab;
        Ok(&self.probs[s.depth][start..start + self.vocab])
    }

    /// Probability of the whole action path.
    pub fn path_prob(&self, mdp: &TreeMdp, actions: &[usize]) -> Result<f64> {
        let mut p = 1.0;
        for (s, &a) in mdp.path_states(actions).into_iter().zip(actions) {
            p *= self.row(s)?[a];
        }
        Ok(p)
    }

    /// Maximum total-variation distance between rows of two tables.
    pub fn max_tv(&self, other: &TabularDist) -> Result<f64> {
        if self.vocab != other.vocab || self.horizon != other.horizon {
            return Err(OracleError::InvalidPolicy("tables have different shapes".into()));
        }
        let mut worst: f64 = 0.0;
        for (la, lb) in self.probs.iter().zip(&other.probs) {
            for (ra, rb) in la.chunks(self.vocab).zip(lb.chunks(self.vocab)) {
                worst = worst.max(tv(ra, rb));
            }
        }
        Ok(worst)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    let mut p: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= total);
    p
}

pub fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueMode {
    /// Per-step rewards with discounting, zero terminal value.
    Stepwise,
    /// Whole discounted return delivered at the leaves.
    Augmented,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMode {
    /// `B(s) = V(s)`.
    Scalar,
    /// `B(s)` = value aggregation of `Q(s, ·)` under the policy at `s`.
    ActionRisk,
}

#[derive(Debug, Clone)]
pub struct ValueTables {
    vocab: usize,
    mode: ValueMode,
    baseline_mode: BaselineMode,
    q: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    baseline: Vec<Vec<f64>>,
}

impl ValueTables {
    pub fn mode(&self) -> ValueMode {
        self.mode
    }

    pub fn baseline_mode(&self) -> BaselineMode {
        self.baseline_mode
    }

    pub fn v(&self, s: State) -> Result<f64> {
        self.v
            .get(s.depth)
            .and_then(|l| l.get(s.index))
            .copied()
            .ok_or(OracleError::UnknownState(s))
    }

    pub fn q(&self, s: State, a: usize) -> Result<f64> {
        if a >= self.vocab {
            return Err(OracleError::UnknownAction { action: a, vocab: self.vocab });
        }
        self.q
            .get(s.depth)
            .and_then(|l| l.get(s.index * self.vocab + a))
            .copied()
            .ok_or(OracleError::UnknownState(s))
    }

    pub fn q_row(&self, s: State) -> Result<&[f64]> {
        let layer = self.q.get(s.depth).ok_or(OracleError::UnknownState(s))?;
        let start = s.index * self.vocab;
        layer
            .get(start..start + self.vocab)
            .ok_or(OracleError::UnknownState(s))
    }

    pub fn baseline(&self, s: State) -> Result<f64> {
        self.baseline
            .get(s.depth)
            .and_then(|l| l.get(s.index))
            .copied()
            .ok_or(OracleError::UnknownState(s))
    }
}

/// Bottom-up evaluation of the value recursion for `policy`.
pub fn eval_values(
    mdp: &TreeMdp,
    policy: &TabularDist,
    measure: RiskMeasureSpec,
    mode: ValueMode,
    baseline_mode: BaselineMode,
) -> Result<ValueTables> {
    policy.fits(mdp)?;
    let v_count = mdp.vocab;
    let t = mdp.horizon;
    let mut v: Vec<Vec<f64>> = vec![Vec::new(); t + 1];
    let mut q: Vec<Vec<f64>> = vec![Vec::new(); t];
    let mut baseline: Vec<Vec<f64>> = vec![Vec::new(); t];

    v[t] = match mode {
        ValueMode::Stepwise => vec![0.0; mdp.leaf_count()],
        ValueMode::Augmented => (0..mdp.leaf_count())
            .map(|i| mdp.path_return(&mdp.leaf_actions(i)))
            .collect(),
    };
    for d in (0..t).rev() {
        let n = mdp.states_at(d);
        let mut qd = Vec::with_capacity(n * v_count);
        let mut vd = Vec::with_capacity(n);
        let mut bd = Vec::with_capacity(n);
        for i in 0..n {
            let s = State { depth: d, index: i };
            let probs = policy.row(s)?;
            let row: Vec<f64> = (0..v_count)
                .map(|a| {
                    let next = v[d + 1][i * v_count + a];
                    match mode {
                        ValueMode::Stepwise => mdp.rewards[d][i * v_count + a] + mdp.gamma * next,
                        ValueMode::Augmented => next,
                    }
                })
                .collect();
            let value: f64 = probs.iter().zip(&row).map(|(p, x)| p * x).sum();
            let b = match baseline_mode {
                BaselineMode::Scalar => value,
                BaselineMode::ActionRisk => {
                    risk::value_aggregate(measure, &Categorical::new(probs.to_vec(), row.clone())?)?
                }
            };
            qd.extend(row);
            vd.push(value);
            bd.push(b);
        }
        q[d] = qd;
        v[d] = vd;
        baseline[d] = bd;
    }
    Ok(ValueTables {
        vocab: v_count,
        mode,
        baseline_mode,
        q,
        v,
        baseline,
    })
}

/// `Q(s, a) − B(s)`.
pub fn advantage(tables: &ValueTables, s: State, a: usize) -> Result<f64> {
    Ok(tables.q(s, a)? - tables.baseline(s)?)
}

/// `π*(z|s) ∝ π_ref(z|s) exp(Q̃_ref(s, z) / β)`, computed in log space.
///
/// The augmented values do not depend on the risk measure (transitions are
/// deterministic), so neither does the optimum.
pub fn closed_form_policy(mdp: &TreeMdp, reference: &TabularDist, beta: f64) -> Result<TabularDist> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(OracleError::Precondition(format!("beta must be > 0, got {beta}")));
    }
    let tables = eval_values(
        mdp,
        reference,
        RiskMeasureSpec::neutral(),
        ValueMode::Augmented,
        BaselineMode::Scalar,
    )?;
    TabularDist::from_log_fn(mdp, |s| {
        let p = reference.row(s).expect("shape checked");
        let q = tables.q_row(s).expect("shape checked");
        p.iter().zip(q).map(|(p, q)| p.ln() + q / beta).collect()
    })
}

/// Maximizes `E_π[Ã_ref(s, ·)] − β KL(π ‖ π_ref)` at every state by
/// multiplicative-weights (entropic mirror) ascent started at `π_ref`.
pub fn brute_force_policy(
    mdp: &TreeMdp,
    reference: &TabularDist,
    measure: RiskMeasureSpec,
    beta: f64,
) -> Result<TabularDist> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(OracleError::Precondition(format!("beta must be > 0, got {beta}")));
    }
    let tables = eval_values(mdp, reference, measure, ValueMode::Augmented, BaselineMode::ActionRisk)?;
    TabularDist::from_fn(mdp, |s| {
        let p_ref = reference.row(s).expect("shape checked");
        let adv: Vec<f64> = (0..mdp.vocab)
            .map(|a| advantage(&tables, s, a).expect("shape checked"))
            .collect();
        maximize_kl_regularized(p_ref, &adv, beta)
    })
}

/// Ascent on `f(π) = Σ π a − β Σ π ln(π/ref)` over the simplex.
fn maximize_kl_regularized(p_ref: &[f64], adv: &[f64], beta: f64) -> Vec<f64> {
    const ITERATIONS: usize = 200;
    const TOLERANCE: f64 = 1e-10;
    // step η = c/β keeps the mirror map contractive with rate 1 − c
    let eta = 0.25 / beta;
    let mut pi = p_ref.to_vec();
    for _ in 0..ITERATIONS {
        let logits: Vec<f64> = pi
            .iter()
            .zip(p_ref)
            .zip(adv)
            .map(|((&p, &r), &a)| {
                if p == 0.0 {
                    return f64::NEG_INFINITY;
                }
                let grad = a - beta * ((p / r).ln() + 1.0);
                p.ln() + eta * grad
            })
            .collect();
        let next = softmax(&logits);
        let change = tv(&next, &pi);
        pi = next;
        if change < TOLERANCE {
            break;
        }
    }
    pi
}

/// `max_s |Ṽ(s) − (R_{1:d} + γ^d V(s))|` over all states, where `R_{1:d}` is
/// the discounted reward collected before `s`.
pub fn verify_lemma1(mdp: &TreeMdp, policy: &TabularDist, measure: RiskMeasureSpec) -> Result<f64> {
    let step = eval_values(mdp, policy, measure, ValueMode::Stepwise, BaselineMode::Scalar)?;
    let aug = eval_values(mdp, policy, measure, ValueMode::Augmented, BaselineMode::Scalar)?;
    let mut worst: f64 = 0.0;
    for d in 0..=mdp.horizon {
        let discount = mdp.gamma.powi(d as i32);
        for i in 0..mdp.states_at(d) {
            let s = State { depth: d, index: i };
            let rhs = mdp.prefix_return(s) + discount * step.v(s)?;
            worst = worst.max((aug.v(s)? - rhs).abs());
        }
    }
    Ok(worst)
}

/// `max_y |r(y) − Ṽ([x]) − Σ_t γ^{t−1} A(s_t, y^t)|` with stepwise
/// advantages under the scalar baseline.
pub fn verify_regret_identity(mdp: &TreeMdp, policy: &TabularDist, measure: RiskMeasureSpec) -> Result<f64> {
    let step = eval_values(mdp, policy, measure, ValueMode::Stepwise, BaselineMode::Scalar)?;
    let aug = eval_values(mdp, policy, measure, ValueMode::Augmented, BaselineMode::Scalar)?;
    let root = aug.v(State::ROOT)?;
    let mut worst: f64 = 0.0;
    for leaf in 0..mdp.leaf_count() {
        let actions = mdp.leaf_actions(leaf);
        let mut regret = 0.0;
        let mut discount = 1.0;
        for (s, &a) in mdp.path_states(&actions).into_iter().zip(&actions) {
            regret += discount * advantage(&step, s, a)?;
            discount *= mdp.gamma;
        }
        worst = worst.max((mdp.path_return(&actions) - root - regret).abs());
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Theorem1Residuals {
    /// Per-leaf advantage sum vs β·(log-ratio + sequential risk ratio).
    pub b6: f64,
    /// `|σ(r₁ − r₂) − σ(u − δ)|` over leaf pairs.
    pub chain: f64,
}

/// Checks the advantage/log-ratio identity for the closed-form optimum and
/// the resulting preference probability chain.
pub fn verify_theorem1(
    mdp: &TreeMdp,
    reference: &TabularDist,
    measure: RiskMeasureSpec,
    beta: f64,
) -> Result<Theorem1Residuals> {
    if mdp.gamma != 1.0 {
        return Err(OracleError::Precondition(format!("gamma must be 1, got {}", mdp.gamma)));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(OracleError::Precondition(format!("beta must be > 0, got {beta}")));
    }
    if measure.kind() == RiskKind::Erm && beta != 1.0 {
        return Err(OracleError::Precondition(format!("ERM requires beta = 1, got {beta}")));
    }
    let optimal = closed_form_policy(mdp, reference, beta)?;
    let tables = eval_values(mdp, reference, measure, ValueMode::Augmented, BaselineMode::ActionRisk)?;

    let n = mdp.leaf_count();
    let mut adv_sum = Vec::with_capacity(n);
    let mut log_ratio = Vec::with_capacity(n);
    let mut seq_rr = Vec::with_capacity(n);
    let mut returns = Vec::with_capacity(n);
    for leaf in 0..n {
        let actions = mdp.leaf_actions(leaf);
        let (mut a_sum, mut lr, mut d) = (0.0, 0.0, 0.0);
        for (s, &a) in mdp.path_states(&actions).into_iter().zip(&actions) {
            a_sum += advantage(&tables, s, a)?;
            let p_ref = reference.row(s)?;
            let p_opt = optimal.row(s)?;
            lr += p_opt[a].ln() - p_ref[a].ln();
            let values: Vec<f64> = p_ref
                .iter()
                .zip(p_opt)
                .map(|(r, o)| if *r > 0.0 { r.ln() - o.ln() } else { 0.0 })
                .collect();
            d += risk::penalty_aggregate(measure, &Categorical::new(p_ref.to_vec(), values)?)?;
        }
        adv_sum.push(a_sum);
        log_ratio.push(lr);
        seq_rr.push(d);
        returns.push(mdp.path_return(&actions));
    }

    let b6 = (0..n)
        .map(|i| (adv_sum[i] - beta * (log_ratio[i] + seq_rr[i])).abs())
        .fold(0.0, f64::max);

    let mut chain: f64 = 0.0;
    for w in 0..n {
        for l in (w + 1)..n {
            let u = beta * log_ratio[w] - beta * log_ratio[l];
            let delta = beta * seq_rr[l] - beta * seq_rr[w];
            chain = chain.max((sigmoid(returns[w] - returns[l]) - sigmoid(u - delta)).abs());
        }
    }
    Ok(Theorem1Residuals { b6, chain })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImprovementReport {
    /// Policy pairs sampled.
    pub attempts: usize,
    /// Pairs meeting the nonnegative-expected-advantage condition.
    pub filtered: usize,
    /// Filtered pairs whose root value decreased by more than 1e-10.
    pub violations: usize,
    /// Smallest `Ṽ_{π′}([x]) − Ṽ_π([x])` among filtered pairs.
    pub worst_margin: f64,
}

/// `min_s E_{z∼π′}[Ã_π(s, z)]` under the action-risk baseline.
pub fn min_expected_advantage(
    mdp: &TreeMdp,
    tables: &ValueTables,
    candidate: &TabularDist,
) -> Result<f64> {
    let mut worst = f64::INFINITY;
    for d in 0..mdp.horizon {
        for i in 0..mdp.states_at(d) {
            let s = State { depth: d, index: i };
            let p = candidate.row(s)?;
            let mut e = 0.0;
            for (a, &pa) in p.iter().enumerate() {
                e += pa * advantage(tables, s, a)?;
            }
            worst = worst.min(e);
        }
    }
    Ok(worst)
}

/// Samples random MDPs and policy pairs until `n_trials` pairs satisfy the
/// improvement condition, then checks the root values.
pub fn search_policy_improvement_counterexamples(
    n_trials: usize,
    measure: RiskMeasureSpec,
    seed: u64,
) -> Result<ImprovementReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ImprovementReport {
        attempts: 0,
        filtered: 0,
        violations: 0,
        worst_margin: f64::INFINITY,
    };
    let max_attempts = 50 * n_trials.max(1);
    while report.filtered < n_trials && report.attempts < max_attempts {
        report.attempts += 1;
        let vocab = rng.random_range(2..=3);
        let horizon = rng.random_range(2..=3);
        let mdp = TreeMdp::random(vocab, horizon, 1.0, &mut rng)?;
        let pi = TabularDist::random(&mdp, 1.0, &mut rng);
        let tables = eval_values(&mdp, &pi, measure, ValueMode::Augmented, BaselineMode::ActionRisk)?;
        let candidate = if rng.random_bool(0.8) {
            let kappa = rng.random_range(0.0..5.0);
            TabularDist::from_log_fn(&mdp, |s| {
                let p = pi.row(s).expect("shape checked");
                (0..vocab)
                    .map(|a| p[a].ln() + kappa * advantage(&tables, s, a).expect("shape checked"))
                    .collect()
            })?
        } else {
            TabularDist::random(&mdp, 2.0, &mut rng)
        };
        if min_expected_advantage(&mdp, &tables, &candidate)? < -1e-12 {
            continue;
        }
        report.filtered += 1;
        let after = eval_values(&mdp, &candidate, measure, ValueMode::Augmented, BaselineMode::ActionRisk)?;
        let margin = after.v(State::ROOT)? - tables.v(State::ROOT)?;
        report.worst_margin = report.worst_margin.min(margin);
        if margin < -1e-10 {
            report.violations += 1;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    Report,
}

impl fmt::Display for CheckStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckStatus::Pass => "pass",
            CheckStatus::Fail => "fail",
            CheckStatus::Report => "report",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub seed: u64,
    pub residual: f64,
    pub status: CheckStatus,
}

impl CheckLine {
    fn asserted(name: String, seed: u64, residual: f64, tolerance: f64) -> Self {
        let status = if residual <= tolerance {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        };
        CheckLine { name, seed, residual, status }
    }

    fn reported(name: String, seed: u64, residual: f64) -> Self {
        CheckLine {
            name,
            seed,
            residual,
            status: CheckStatus::Report,
        }
    }
}

impl fmt::Display for CheckLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {:.3e} {}", self.name, self.seed, self.residual, self.status)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerificationReport {
    pub lines: Vec<CheckLine>,
}

impl VerificationReport {
    pub fn all_asserted_pass(&self) -> bool {
        self.lines.iter().all(|l| l.status != CheckStatus::Fail)
    }

    pub fn line(&self, name: &str) -> Option<&CheckLine> {
        self.lines.iter().find(|l| l.name == name)
    }
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for line in &self.lines {
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

/// Sizes for [`run_verification_suite`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuiteSizes {
    /// Random MDPs per identity check.
    pub mdps: usize,
    /// Filtered trials per improvement search.
    pub improvement_trials: usize,
}

impl Default for SuiteSizes {
    fn default() -> Self {
        SuiteSizes {
            mdps: 100,
            improvement_trials: 1000,
        }
    }
}

fn suite_measures() -> [RiskMeasureSpec; 3] {
    [
        RiskMeasureSpec::neutral(),
        RiskMeasureSpec::cvar(0.95).expect("valid"),
        RiskMeasureSpec::erm(5.0).expect("valid"),
    ]
}

fn tag(m: RiskMeasureSpec) -> String {
    match m.kind() {
        RiskKind::Neutral => "neutral".into(),
        k => format!("{k}{}", m.mu()),
    }
}

/// Random MDP number `k` of a suite, sized between V=3, T=3 and V=4, T=4.
fn suite_mdp(seed: u64, k: usize, gamma: f64) -> Result<(TreeMdp, TabularDist)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    let vocab = if k % 4 == 3 { 4 } else { 3 };
    let horizon = if k % 8 == 7 { 4 } else { 3 };
    let mdp = TreeMdp::random(vocab, horizon, gamma, &mut rng)?;
    let policy = TabularDist::random(&mdp, 1.0, &mut rng);
    Ok((mdp, policy))
}

/// Runs every identity check over seeded random MDPs.
pub fn run_verification_suite(seed: u64, sizes: SuiteSizes) -> Result<VerificationReport> {
    let mut lines = Vec::new();
    let measures = suite_measures();
    let max_over = |gamma: f64, f: &mut dyn FnMut(&TreeMdp, &TabularDist) -> Result<f64>| -> Result<f64> {
        let mut worst: f64 = 0.0;
        for k in 0..sizes.mdps {
            let (mdp, pi) = suite_mdp(seed, k, gamma)?;
            worst = worst.max(f(&mdp, &pi)?);
        }
        Ok(worst)
    };

    for gamma in [1.0, 0.9] {
        for m in measures {
            let r = max_over(gamma, &mut |mdp, pi| verify_lemma1(mdp, pi, m))?;
            lines.push(CheckLine::asserted(format!("lemma1/{}/g{gamma}", tag(m)), seed, r, 1e-10));
        }
    }

    for m in measures {
        for beta in [0.1, 1.0] {
            let r = max_over(1.0, &mut |mdp, pi| {
                closed_form_policy(mdp, pi, beta)?.max_tv(&brute_force_policy(mdp, pi, m, beta)?)
            })?;
            lines.push(CheckLine::asserted(format!("closed_form/{}/b{beta}", tag(m)), seed, r, 1e-6));
        }
    }

    for gamma in [1.0, 0.9] {
        let r = max_over(gamma, &mut |mdp, pi| verify_regret_identity(mdp, pi, RiskMeasureSpec::neutral()))?;
        lines.push(CheckLine::asserted(format!("regret_identity/g{gamma}"), seed, r, 1e-10));
    }

    let r = max_over(1.0, &mut |mdp, pi| {
        let a = eval_values(mdp, pi, RiskMeasureSpec::neutral(), ValueMode::Augmented, BaselineMode::Scalar)?;
        let b = eval_values(mdp, pi, RiskMeasureSpec::neutral(), ValueMode::Augmented, BaselineMode::ActionRisk)?;
        let mut worst: f64 = 0.0;
        for d in 0..mdp.horizon() {
            for i in 0..mdp.states_at(d) {
                let s = State { depth: d, index: i };
                for a_ in 0..mdp.vocab() {
                    worst = worst.max((advantage(&a, s, a_)? - advantage(&b, s, a_)?).abs());
                }
            }
        }
        Ok(worst)
    })?;
    lines.push(CheckLine::asserted("baselines_agree/neutral".into(), seed, r, 1e-12));

    for (m, beta) in [(measures[0], 0.1), (measures[1], 0.1), (measures[2], 1.0)] {
        let mut b6: f64 = 0.0;
        let mut chain: f64 = 0.0;
        for k in 0..sizes.mdps {
            let (mdp, pi) = suite_mdp(seed, k, 1.0)?;
            let r = verify_theorem1(&mdp, &pi, m, beta)?;
            b6 = b6.max(r.b6);
            chain = chain.max(r.chain);
        }
        lines.push(CheckLine::asserted(format!("theorem1_b6/{}/b{beta}", tag(m)), seed, b6, 1e-8));
        let name = format!("theorem1_chain/{}/b{beta}", tag(m));
        lines.push(if m.kind() == RiskKind::Neutral {
            CheckLine::asserted(name, seed, chain, 1e-8)
        } else {
            CheckLine::reported(name, seed, chain)
        });
    }

    for m in measures {
        let rep = search_policy_improvement_counterexamples(sizes.improvement_trials, m, seed)?;
        let name = format!("lemma2_violations/{}", tag(m));
        let count = rep.violations as f64;
        lines.push(if m.kind() == RiskKind::Neutral {
            let complete = rep.filtered == sizes.improvement_trials;
            CheckLine::asserted(name, seed, if complete { count } else { f64::INFINITY }, 0.0)
        } else {
            CheckLine::reported(name, seed, count)
        });
        if m.kind() != RiskKind::Neutral {
            lines.push(CheckLine::reported(
                format!("lemma2_worst_margin/{}", tag(m)),
                seed,
                rep.worst_margin,
            ));
        }
    }
    Ok(VerificationReport { lines })
}
