//! Exact risk aggregators over finite categorical distributions.
//!
//! Two orientations are provided:
//!
//! * [`penalty_aggregate`] treats values as losses and weights the upper tail.
//!   CVaR(μ) is the mean of the largest μ-mass of values, ERM(μ) is
//!   `(1/μ) log E[exp(μ v)]`. Both reduce to the mean at their neutral limits
//!   (μ = 1 for CVaR, μ → 0 for ERM).
//! * [`value_aggregate`] treats values as rewards and is the pessimistic dual
//!   `-penalty(-v)`.
//!
//! Everything is computed exactly by sorting and cumulative mass; nothing is
//! sampled.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::diff::{log_sum_exp, DiffError, Graph, NodeRef};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiskError {
    #[error("invalid risk parameter for {kind}: {detail}")]
    InvalidMu { kind: RiskKind, detail: String },
    #[error("empty distribution")]
    Empty,
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("operation requires a CVaR measure, got {0}")]
    NotCvar(RiskKind),
    #[error("unknown risk measure `{0}` (expected neutral, cvar or erm)")]
    UnknownKind(String),
    #[error(transparent)]
    Graph(#[from] DiffError),
}

pub type Result<T> = std::result::Result<T, RiskError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RiskKind {
    Neutral,
    Cvar,
    Erm,
}

impl fmt::Display for RiskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RiskKind::Neutral => "neutral",
            RiskKind::Cvar => "cvar",
            RiskKind::Erm => "erm",
        })
    }
}

impl FromStr for RiskKind {
    type Err = RiskError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "neutral" | "mean" => Ok(RiskKind::Neutral),
            "cvar" => Ok(RiskKind::Cvar),
            "erm" => Ok(RiskKind::Erm),
            _ => Err(RiskError::UnknownKind(s.to_string())),
        }
    }
}

/// Which aggregator to apply and its risk parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskMeasureSpec {
    kind: RiskKind,
    mu: f64,
}

impl RiskMeasureSpec {
    pub fn neutral() -> Self {
        RiskMeasureSpec {
            kind: RiskKind::Neutral,
            mu: 1.0,
        }
    }

    /// CVaR retaining the worst `mu` fraction of mass; `mu = 1` is the mean.
    pub fn cvar(mu: f64) -> Result<Self> {
        Self::new(RiskKind::Cvar, mu)
    }

    /// Entropic risk with parameter `mu > 0`.
    pub fn erm(mu: f64) -> Result<Self> {
        Self::new(RiskKind::Erm, mu)
    }

    pub fn new(kind: RiskKind, mu: f64) -> Result<Self> {
        let ok = match kind {
            RiskKind::Neutral => true,
            RiskKind::Cvar => mu > 0.0 && mu <= 1.0,
            RiskKind::Erm => mu > 0.0 && mu.is_finite(),
        };
        if !ok {
            let detail = match kind {
                RiskKind::Cvar => format!("mu must lie in (0, 1], got {mu}"),
                _ => format!("mu must be positive and finite, got {mu}"),
            };
            return Err(RiskError::InvalidMu { kind, detail });
        }
        let mu = if kind == RiskKind::Neutral { 1.0 } else { mu };
        Ok(RiskMeasureSpec { kind, mu })
    }

    pub fn kind(&self) -> RiskKind {
        self.kind
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }
}

impl fmt::Display for RiskMeasureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            RiskKind::Neutral => write!(f, "neutral"),
            k => write!(f, "{k}({})", self.mu),
        }
    }
}

/// Finite distribution with one value per outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Categorical {
    probs: Vec<f64>,
    values: Vec<f64>,
}

impl Categorical {
    pub fn new(probs: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(RiskError::Empty);
        }
        if probs.len() != values.len() {
            return Err(RiskError::InvalidDistribution(format!(
                "{} probabilities but {} values",
                probs.len(),
                values.len()
            )));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(RiskError::InvalidDistribution(
                "probabilities must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(RiskError::InvalidDistribution(format!(
                "probabilities sum to {total}"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RiskError::InvalidDistribution("values must be finite".into()));
        }
        Ok(Categorical { probs, values })
    }

    pub fn point_mass(value: f64) -> Self {
        Categorical {
            probs: vec![1.0],
            values: vec![value],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Categorical {
        Categorical {
            probs: self.probs.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.probs.iter().zip(&self.values).map(|(p, v)| p * v).sum()
    }
}

/// Risk-penalty aggregation (upper tail of the values).
pub fn penalty_aggregate(spec: RiskMeasureSpec, dist: &Categorical) -> Result<f64> {
    Ok(match spec.kind {
        RiskKind::Neutral => dist.mean(),
        RiskKind::Cvar if spec.mu == 1.0 => dist.mean(),
        RiskKind::Cvar => cvar_min_formula(&dist.values, &dist.probs, spec.mu),
        RiskKind::Erm => erm(&dist.values, &dist.probs, spec.mu),
    })
}

/// Pessimistic reward aggregation, `-penalty_aggregate(-values)`.
pub fn value_aggregate(spec: RiskMeasureSpec, dist: &Categorical) -> Result<f64> {
    Ok(-penalty_aggregate(spec, &dist.map_values(|v| -v))?)
}

/// The largest minimizer η* of `η + (1/μ) E[(v - η)+]`: the atom at which
/// the cumulative mass taken from the top first reaches μ.
pub fn var_threshold(spec: RiskMeasureSpec, dist: &Categorical) -> Result<f64> {
    if spec.kind != RiskKind::Cvar {
        return Err(RiskError::NotCvar(spec.kind));
    }
    let order = descending_order(&dist.values);
    let mut mass = 0.0;
    let mut last = dist.values[order[0]];
    for &i in &order {
        if dist.probs[i] == 0.0 {
            continue;
        }
        mass += dist.probs[i];
        last = dist.values[i];
        if mass >= spec.mu - MASS_TOL {
            break;
        }
    }
    Ok(last)
}

const MASS_TOL: f64 = 1e-12;

fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// CVaR envelope weights: `p/μ` above the threshold atom, the fractional
/// remainder on the threshold atom (shared proportionally among tied
/// values), zero below. The weights sum to one.
pub fn tail_weights(values: &[f64], probs: &[f64], mu: f64) -> Vec<f64> {
    let mut weights = vec![0.0; values.len()];
    if mu >= 1.0 {
        weights.copy_from_slice(probs);
        return weights;
    }
    let order = descending_order(values);
    let mut remaining = mu;
    let mut k = 0;
    while k < order.len() && remaining > 0.0 {
        // group of equal values
        let v = values[order[k]];
        let mut end = k;
        let mut group_mass = 0.0;
        while end < order.len() && values[order[end]] == v {
            group_mass += probs[order[end]];
            end += 1;
        }
        if group_mass > 0.0 {
            let take = group_mass.min(remaining);
            for &i in &order[k..end] {
                weights[i] = take * (probs[i] / group_mass) / mu;
            }
            remaining -= take;
            if remaining <= MASS_TOL * mu {
                break;
            }
        }
        k = end;
    }
    weights
}

/// CVaR as the sorted-tail weighted mean.
pub fn cvar_sorted_tail(values: &[f64], probs: &[f64], mu: f64) -> f64 {
    tail_weights(values, probs, mu)
        .iter()
        .zip(values)
        .map(|(w, v)| w * v)
        .sum()
}

/// CVaR as `min_η { η + (1/μ) Σ p (v - η)+ }`, evaluated at every atom (the
/// objective is convex and piecewise linear with kinks only at atoms).
pub fn cvar_min_formula(values: &[f64], probs: &[f64], mu: f64) -> f64 {
    values
        .iter()
        .zip(probs)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&eta, _)| {
            let excess: f64 = values
                .iter()
                .zip(probs)
                .map(|(&v, &p)| p * (v - eta).max(0.0))
                .sum();
            eta + excess / mu
        })
        .fold(f64::INFINITY, f64::min)
}

fn erm(values: &[f64], probs: &[f64], mu: f64) -> f64 {
    let support = || values.iter().zip(probs).filter(|(_, &p)| p > 0.0);
    let terms: Vec<f64> = support().map(|(&v, &p)| p.ln() + mu * v).collect();
    let log_p: Vec<f64> = support().map(|(_, &p)| p.ln()).collect();
    // subtracting ln Σp keeps the value exactly zero at v = 0 even when the
    // probabilities sum to one only up to rounding
    (log_sum_exp(&terms) - log_sum_exp(&log_p)) / mu
}

/// Differentiable penalty aggregation of `values` (a graph node) under fixed
/// probabilities.
pub fn penalty_aggregate_node(
    graph: &mut Graph,
    spec: RiskMeasureSpec,
    probs: &[f64],
    values: NodeRef,
) -> Result<NodeRef> {
    if probs.is_empty() {
        return Err(RiskError::Empty);
    }
    let neutral = |graph: &mut Graph| -> Result<NodeRef> {
        let p = graph.constant(probs)?;
        Ok(graph.dot(p, values)?)
    };
    match spec.kind {
        RiskKind::Neutral => neutral(graph),
        RiskKind::Cvar if spec.mu == 1.0 => neutral(graph),
        RiskKind::Cvar => Ok(graph.weighted_tail_mean(values, probs, spec.mu)?),
        RiskKind::Erm => {
            let support: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
            let log_p: Vec<f64> = support.iter().map(|&i| probs[i].ln()).collect();
            let v = if support.len() == probs.len() {
                values
            } else {
                graph.select(values, &support)?
            };
            let scaled = graph.scale(v, spec.mu)?;
            let lp = graph.constant(&log_p)?;
            let shifted = graph.add(scaled, lp)?;
            let lse = graph.logsumexp(shifted)?;
            let norm = graph.scalar_constant(log_sum_exp(&log_p))?;
            let centered = graph.sub(lse, norm)?;
            Ok(graph.scale(centered, 1.0 / spec.mu)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Brute-force CVaR: minimize the Rockafellar-Uryasev objective over a
    /// fine η grid spanning the value range.
    fn cvar_grid(values: &[f64], probs: &[f64], mu: f64) -> (f64, f64) {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1.0;
        let n = 200_000;
        let mut best = (f64::INFINITY, f64::NAN);
        for k in 0..=n {
            let eta = lo + (hi - lo) * k as f64 / n as f64;
            let obj = eta
                + values
                    .iter()
                    .zip(probs)
                    .map(|(v, p)| p * (v - eta).max(0.0))
                    .sum::<f64>()
                    / mu;
            // `<=` keeps the largest minimizer on flat stretches
            if obj <= best.0 + 1e-12 {
                best = (obj.min(best.0), eta);
            }
        }
        best
    }

    fn dist(p: &[f64], v: &[f64]) -> Categorical {
        Categorical::new(p.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn point_mass_is_its_value_for_every_measure() {
        let d = Categorical::point_mass(2.5);
        for spec in [
            RiskMeasureSpec::neutral(),
            RiskMeasureSpec::cvar(0.3).unwrap(),
            RiskMeasureSpec::erm(7.0).unwrap(),
        ] {
            assert!((penalty_aggregate(spec, &d).unwrap() - 2.5).abs() < 1e-15);
            assert!((value_aggregate(spec, &d).unwrap() - 2.5).abs() < 1e-15);
        }
        let cv = RiskMeasureSpec::cvar(0.4).unwrap();
        assert_eq!(var_threshold(cv, &d).unwrap(), 2.5);
    }

    #[test]
    fn cvar_two_point_example() {
        let d = dist(&[0.5, 0.5], &[0.0, 1.0]);
        let spec = RiskMeasureSpec::cvar(0.5).unwrap();
        let (grid_min, grid_eta) = cvar_grid(d.values(), d.probs(), 0.5);
        assert!((grid_min - 1.0).abs() < 1e-9);
        assert!((grid_eta - 1.0).abs() < 1e-4);
        assert!((penalty_aggregate(spec, &d).unwrap() - 1.0).abs() < 1e-12);
        assert!(value_aggregate(spec, &d).unwrap().abs() < 1e-12);
        assert_eq!(var_threshold(spec, &d).unwrap(), 1.0);
    }

    #[test]
    fn var_threshold_three_atoms() {
        let third = 1.0 / 3.0;
        let d = dist(&[third, third, third], &[1.0, 2.0, 3.0]);
        let (_, grid_eta) = cvar_grid(d.values(), d.probs(), third);
        assert!((grid_eta - 3.0).abs() < 1e-4);
        let spec = RiskMeasureSpec::cvar(third).unwrap();
        assert_eq!(var_threshold(spec, &d).unwrap(), 3.0);
    }

    #[test]
    fn erm_two_point_example() {
        let d = dist(&[0.5, 0.5], &[0.0, 1.0]);
        let direct = (0.5 * (1.0 + std::f64::consts::E)).ln();
        assert!((direct - 0.62011).abs() < 1e-5);
        let spec = RiskMeasureSpec::erm(1.0).unwrap();
        assert!((penalty_aggregate(spec, &d).unwrap() - direct).abs() < 1e-14);
    }

    #[test]
    fn cvar_at_one_is_the_mean_exactly() {
        let d = dist(&[0.2, 0.3, 0.5], &[1.5, -0.7, 0.25]);
        let spec = RiskMeasureSpec::cvar(1.0).unwrap();
        assert_eq!(penalty_aggregate(spec, &d).unwrap(), d.mean());
    }

    #[test]
    fn neutral_value_aggregate_is_the_mean() {
        let d = dist(&[0.25, 0.75], &[4.0, -2.0]);
        assert_eq!(value_aggregate(RiskMeasureSpec::neutral(), &d).unwrap(), -0.5);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(RiskMeasureSpec::cvar(0.0).is_err());
        assert!(RiskMeasureSpec::cvar(1.5).is_err());
        assert!(RiskMeasureSpec::erm(0.0).is_err());
        assert!(RiskMeasureSpec::erm(f64::INFINITY).is_err());
        assert!(Categorical::new(vec![], vec![]).is_err());
        assert!(Categorical::new(vec![0.5, 0.4], vec![0.0, 1.0]).is_err());
        assert!(Categorical::new(vec![1.0], vec![0.0, 1.0]).is_err());
        let d = Categorical::point_mass(0.0);
        assert!(matches!(
            var_threshold(RiskMeasureSpec::neutral(), &d),
            Err(RiskError::NotCvar(_))
        ));
    }

    #[test]
    fn zero_probability_atoms_are_ignored() {
        let d = dist(&[0.0, 0.5, 0.5], &[100.0, 0.0, 1.0]);
        let cv = RiskMeasureSpec::cvar(0.5).unwrap();
        assert!((penalty_aggregate(cv, &d).unwrap() - 1.0).abs() < 1e-12);
        assert!((cvar_sorted_tail(d.values(), d.probs(), 0.5) - 1.0).abs() < 1e-12);
        let e = RiskMeasureSpec::erm(1.0).unwrap();
        let direct = (0.5 * (1.0 + std::f64::consts::E)).ln();
        assert!((penalty_aggregate(e, &d).unwrap() - direct).abs() < 1e-14);
    }

    #[test]
    fn node_route_matches_plain_route() {
        let d = dist(&[0.1, 0.4, 0.2, 0.3], &[0.3, -1.0, 2.0, 0.7]);
        for spec in [
            RiskMeasureSpec::neutral(),
            RiskMeasureSpec::cvar(0.35).unwrap(),
            RiskMeasureSpec::erm(3.0).unwrap(),
        ] {
            let mut g = Graph::new();
            let v = g.leaf(d.values()).unwrap();
            let node = penalty_aggregate_node(&mut g, spec, d.probs(), v).unwrap();
            let plain = penalty_aggregate(spec, &d).unwrap();
            assert!((g.scalar(node) - plain).abs() < 1e-12, "{spec}");
        }
    }

    #[test]
    fn node_route_gradients() {
        let probs = [0.1, 0.4, 0.2, 0.3];
        let x = [0.3, -1.0, 2.0, 0.7];
        for spec in [
            RiskMeasureSpec::neutral(),
            RiskMeasureSpec::cvar(0.35).unwrap(),
            RiskMeasureSpec::erm(3.0).unwrap(),
        ] {
            let err = crate::diff::finite_diff_check(
                |g, v| Ok(penalty_aggregate_node(g, spec, &probs, v).unwrap()),
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "{spec}: {err}");
        }
    }

    fn arb_dist() -> impl Strategy<Value = Categorical> {
        (1usize..8).prop_flat_map(|n| {
            (
                proptest::collection::vec(0.0f64..1.0, n),
                proptest::collection::vec(-5.0f64..5.0, n),
            )
                .prop_filter_map("zero mass", |(w, v)| {
                    let total: f64 = w.iter().sum();
                    (total > 1e-3).then(|| {
                        let p = w.iter().map(|x| x / total).collect();
                        Categorical::new(p, v).unwrap()
                    })
                })
        })
    }

    fn arb_spec() -> impl Strategy<Value = RiskMeasureSpec> {
        prop_oneof![
            Just(RiskMeasureSpec::neutral()),
            (0.01f64..=1.0).prop_map(|m| RiskMeasureSpec::cvar(m).unwrap()),
            (0.01f64..10.0).prop_map(|m| RiskMeasureSpec::erm(m).unwrap()),
        ]
    }

    proptest! {
        #[test]
        fn translation_invariance(d in arb_dist(), s in arb_spec(), c in -10.0f64..10.0) {
            let base = penalty_aggregate(s, &d).unwrap();
            let shifted = penalty_aggregate(s, &d.map_values(|v| v + c)).unwrap();
            prop_assert!((shifted - base - c).abs() < 1e-10);
        }

        #[test]
        fn monotone_in_values(d in arb_dist(), s in arb_spec(), bump in proptest::collection::vec(0.0f64..2.0, 8)) {
            let raised = Categorical::new(
                d.probs().to_vec(),
                d.values().iter().zip(&bump).map(|(v, b)| v + b).collect(),
            ).unwrap();
            prop_assert!(penalty_aggregate(s, &d).unwrap() <= penalty_aggregate(s, &raised).unwrap() + 1e-12);
        }

        #[test]
        fn dominates_the_mean(d in arb_dist(), s in arb_spec()) {
            prop_assert!(penalty_aggregate(s, &d).unwrap() >= d.mean() - 1e-12);
            prop_assert!(value_aggregate(s, &d).unwrap() <= d.mean() + 1e-12);
        }

        #[test]
        fn cvar_two_routes_agree(d in arb_dist(), mu in 0.01f64..=1.0) {
            let a = cvar_min_formula(d.values(), d.probs(), mu);
            let b = cvar_sorted_tail(d.values(), d.probs(), mu);
            prop_assert!((a - b).abs() < 1e-10, "{} vs {}", a, b);
        }

        #[test]
        fn cvar_threshold_minimizes(d in arb_dist(), mu in 0.01f64..=1.0) {
            let spec = RiskMeasureSpec::cvar(mu).unwrap();
            let eta = var_threshold(spec, &d).unwrap();
            let obj = |e: f64| e + d.values().iter().zip(d.probs()).map(|(v, p)| p * (v - e).max(0.0)).sum::<f64>() / mu;
            let best = cvar_min_formula(d.values(), d.probs(), mu);
            prop_assert!((obj(eta) - best).abs() < 1e-9);
        }

        #[test]
        fn parameter_monotonicity(d in arb_dist(), a in 0.01f64..=1.0, b in 0.01f64..=1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let c_lo = penalty_aggregate(RiskMeasureSpec::cvar(lo).unwrap(), &d).unwrap();
            let c_hi = penalty_aggregate(RiskMeasureSpec::cvar(hi).unwrap(), &d).unwrap();
            prop_assert!(c_lo >= c_hi - 1e-12);
            let e_lo = penalty_aggregate(RiskMeasureSpec::erm(lo * 5.0).unwrap(), &d).unwrap();
            let e_hi = penalty_aggregate(RiskMeasureSpec::erm(hi * 5.0).unwrap(), &d).unwrap();
            prop_assert!(e_lo <= e_hi + 1e-12);
        }

        #[test]
        fn neutral_limits(d in arb_dist()) {
            // Jensen below, Hoeffding's lemma above: 0 <= ERM - mean <= mu (b - a)^2 / 8
            let mu = 1e-6;
            let e = penalty_aggregate(RiskMeasureSpec::erm(mu).unwrap(), &d).unwrap();
            let lo = d.values().iter().copied().fold(f64::INFINITY, f64::min);
            let hi = d.values().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(e - d.mean() >= -1e-7);
            prop_assert!(e - d.mean() <= mu * (hi - lo).powi(2) / 8.0 + 1e-7);
            let c = penalty_aggregate(RiskMeasureSpec::cvar(1.0).unwrap(), &d).unwrap();
            prop_assert_eq!(c, d.mean());
        }

        #[test]
        fn homogeneity(d in arb_dist(), c in 0.05f64..5.0, mu in 0.05f64..1.0) {
            let scaled = d.map_values(|v| c * v);
            let cv = RiskMeasureSpec::cvar(mu).unwrap();
            prop_assert!((penalty_aggregate(cv, &scaled).unwrap() - c * penalty_aggregate(cv, &d).unwrap()).abs() < 1e-10);
            let n = RiskMeasureSpec::neutral();
            prop_assert!((penalty_aggregate(n, &scaled).unwrap() - c * penalty_aggregate(n, &d).unwrap()).abs() < 1e-10);
            let e = RiskMeasureSpec::erm(mu).unwrap();
            let ec = RiskMeasureSpec::erm(c * mu).unwrap();
            prop_assert!((penalty_aggregate(e, &scaled).unwrap() - c * penalty_aggregate(ec, &d).unwrap()).abs() < 1e-10);
        }
    }
}
