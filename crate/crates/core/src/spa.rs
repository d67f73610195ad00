//! Parallel-schedule message passing in the LLR domain.
//!
//! One iteration updates every factor-to-variable message from the current
//! variable-to-factor messages, then recomputes every variable-to-factor
//! message. All messages start at zero. The factor update is either the
//! sum-product rule or one of the learned rules:
//!
//! * [`UpdateRule::Spa`]: `L_out = 2 atanh(tanh(E_nm) tanh(L_ext / 2))`.
//! * [`UpdateRule::NeuralExtrinsic`]: the network sees `[L_ext, E_nm]`.
//! * [`UpdateRule::Neural`]: unaries are clustered into the pairwise factors
//!   and the network also sees the intrinsic message on the output edge:
//!   `[L_ext, L_intr, Ẽ_src, E_nm, Ẽ_dst]`.
//!
//! Momentum damps factor-to-variable messages,
//! `L ← (1 - μ) L_new + μ L_old`. Every message is clamped to
//! `±`[`LLR_CLAMP`] after each update.

use crate::beliefs::{spin, BeliefSet};
use crate::error::ConfigError;
use crate::graph::PairwiseFactorGraph;
use crate::neural::{neural_fn_update, neural_fn_update_extrinsic, MlpParams};
use crate::scalar::{softmax, Scalar};

pub const LLR_CLAMP: f64 = 30.0;

const ATANH_LIMIT: f64 = 1.0 - 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UpdateRule {
    Spa,
    NeuralExtrinsic,
    Neural,
}

impl UpdateRule {
    pub fn name(self) -> &'static str {
        match self {
            UpdateRule::Spa => "spa",
            UpdateRule::NeuralExtrinsic => "neural-extrinsic",
            UpdateRule::Neural => "neural",
        }
    }

    /// Network input count for this rule with `side` extra features.
    pub fn n_in(self, side: usize) -> Option<usize> {
        match self {
            UpdateRule::Spa => None,
            UpdateRule::NeuralExtrinsic => Some(crate::neural::EXTRINSIC_INPUTS + side),
            UpdateRule::Neural => Some(crate::neural::NON_EXTRINSIC_INPUTS + side),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub iterations: usize,
    pub momentum: f64,
    pub rule: UpdateRule,
    pub convergence_tol: f64,
    /// Keep the beliefs after every iteration in [`RunOutput::history`].
    pub record_history: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            momentum: 0.0,
            rule: UpdateRule::Spa,
            convergence_tol: 1e-8,
            record_history: false,
        }
    }
}

impl RunConfig {
    pub fn with_rule(rule: UpdateRule) -> Self {
        Self {
            rule,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.iterations == 0 {
            return Err(ConfigError::Invalid("iterations must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(ConfigError::Invalid(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Directed messages; slot `2 * edge + side` addresses the endpoint
/// `edge.endpoint(side)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageState<S> {
    pub fn_to_vn: Vec<S>,
    pub vn_to_fn: Vec<S>,
    pub iteration: usize,
}

impl<S: Scalar> MessageState<S> {
    pub fn zeros(num_edges: usize) -> Self {
        Self {
            fn_to_vn: vec![S::zero(); 2 * num_edges],
            vn_to_fn: vec![S::zero(); 2 * num_edges],
            iteration: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput<S> {
    pub messages: MessageState<S>,
    pub beliefs: BeliefSet<S>,
    /// Unclamped single-belief LLRs.
    pub llrs: Vec<S>,
    pub converged: bool,
    pub history: Vec<BeliefSet<S>>,
}

/// Variable-node rule: clamped sum of the incoming LLRs.
pub fn vn_update<S: Scalar>(incoming: &[S]) -> S {
    incoming
        .iter()
        .fold(S::zero(), |acc, &l| acc + l)
        .clamp(-LLR_CLAMP, LLR_CLAMP)
}

/// Sum-product rule of a degree-2 factor `exp(E x_n x_m)` in LLR form.
pub fn spa_fn_update<S: Scalar>(coupling: S, l_in: S) -> S {
    let t = (coupling.tanh() * (l_in * S::from_f64(0.5)).tanh()).clamp(-ATANH_LIMIT, ATANH_LIMIT);
    (S::from_f64(2.0) * t.atanh()).clamp(-LLR_CLAMP, LLR_CLAMP)
}

/// Constant LLR emitted by the unary factor `exp(E_n x)`.
pub fn unary_llr<S: Scalar>(g: &PairwiseFactorGraph<S>, n: usize) -> S {
    S::from_f64(2.0) * g.unary()[n]
}

/// A graph prepared for message passing with one update rule. The network
/// parameters, when present, are a single shared instance used at every
/// factor and in every iteration.
pub struct MessagePasser<'a, S> {
    graph: &'a PairwiseFactorGraph<S>,
    rule: UpdateRule,
    momentum: S,
    params: Option<&'a MlpParams<S>>,
    side: &'a [S],
    // Ẽ_n = E_n / d_n, only used by the non-extrinsic rule.
    shares: Vec<S>,
    // 2 E_n for the extrinsic rules, 2 × residual for the clustered rule.
    base_llr: Vec<S>,
}

impl<'a, S: Scalar> MessagePasser<'a, S> {
    pub fn new(
        graph: &'a PairwiseFactorGraph<S>,
        rule: UpdateRule,
        momentum: f64,
        params: Option<&'a MlpParams<S>>,
        side: &'a [S],
    ) -> Result<Self, ConfigError> {
        if let Some(expected) = rule.n_in(side.len()) {
            let p = params.ok_or(ConfigError::MissingParams(rule.name()))?;
            if p.n_in != expected {
                return Err(ConfigError::Arity {
                    expected: p.n_in,
                    got: expected,
                });
            }
        }
        let (shares, base_llr) = match rule {
            UpdateRule::Neural => {
                let c = graph.cluster_unaries();
                let mut shares = vec![S::zero(); graph.num_vars()];
                for e in &c.edges {
                    shares[e.n] = e.share_n;
                    shares[e.m] = e.share_m;
                }
                let base = c
                    .residual_unary
                    .iter()
                    .map(|&r| S::from_f64(2.0) * r)
                    .collect();
                (shares, base)
            }
            _ => (
                Vec::new(),
                (0..graph.num_vars()).map(|n| unary_llr(graph, n)).collect(),
            ),
        };
        Ok(Self {
            graph,
            rule,
            momentum: S::from_f64(momentum),
            params,
            side,
            shares,
            base_llr,
        })
    }

    pub fn graph(&self) -> &PairwiseFactorGraph<S> {
        self.graph
    }

    pub fn rule(&self) -> UpdateRule {
        self.rule
    }

    /// The one parameter set shared by every factor update, if any.
    pub fn shared_params(&self) -> Option<&'a MlpParams<S>> {
        self.params
    }

    fn factor_update(&self, msgs: &MessageState<S>, edge: usize, out_side: usize) -> S {
        let e = &self.graph.edges()[edge];
        let src = 1 - out_side;
        let l_ext = msgs.vn_to_fn[2 * edge + src];
        match self.rule {
            UpdateRule::Spa => spa_fn_update(e.coupling, l_ext),
            UpdateRule::NeuralExtrinsic => {
                let p = self.params.expect("checked in new");
                neural_fn_update_extrinsic(p, l_ext, e.coupling, self.side).expect("arity checked")
            }
            UpdateRule::Neural => {
                let p = self.params.expect("checked in new");
                let l_intr = msgs.vn_to_fn[2 * edge + out_side];
                let share_src = self.shares[e.endpoint(src)];
                let share_dst = self.shares[e.endpoint(out_side)];
                neural_fn_update(p, l_ext, l_intr, share_src, e.coupling, share_dst, self.side)
                    .expect("arity checked")
            }
        }
    }

    /// One parallel iteration. Returns the largest absolute message change.
    pub fn step(&self, msgs: &mut MessageState<S>) -> f64 {
        let g = self.graph;
        let keep = S::one() - self.momentum;
        let mut delta: f64 = 0.0;
        let new_fn: Vec<S> = (0..g.num_edges())
            .flat_map(|e| [(e, 0), (e, 1)])
            .map(|(e, side)| {
                let fresh = self.factor_update(msgs, e, side);
                let old = msgs.fn_to_vn[2 * e + side];
                if self.momentum.value() == 0.0 {
                    fresh
                } else {
                    (keep * fresh + self.momentum * old).clamp(-LLR_CLAMP, LLR_CLAMP)
                }
            })
            .collect();
        for (old, new) in msgs.fn_to_vn.iter_mut().zip(new_fn) {
            delta = delta.max((new.value() - old.value()).abs());
            *old = new;
        }
        let mut incoming = Vec::with_capacity(8);
        for (e, edge) in g.edges().iter().enumerate() {
            for side in 0..2 {
                let v = edge.endpoint(side);
                incoming.clear();
                incoming.push(self.base_llr[v]);
                for inc in g.incident(v) {
                    if inc.edge != e {
                        incoming.push(msgs.fn_to_vn[2 * inc.edge + inc.side]);
                    }
                }
                let new = vn_update(&incoming);
                let slot = 2 * e + side;
                delta = delta.max((new.value() - msgs.vn_to_fn[slot].value()).abs());
                msgs.vn_to_fn[slot] = new;
            }
        }
        msgs.iteration += 1;
        delta
    }

    /// Unclamped single-belief LLRs.
    pub fn belief_llrs(&self, msgs: &MessageState<S>) -> Vec<S> {
        (0..self.graph.num_vars())
            .map(|v| {
                self.graph
                    .incident(v)
                    .iter()
                    .fold(self.base_llr[v], |acc, inc| {
                        acc + msgs.fn_to_vn[2 * inc.edge + inc.side]
                    })
            })
            .collect()
    }

    /// Singles from all incoming factor messages; pairs as
    /// `b_nm ∝ φ_nm · m_{x_n→f} · m_{x_m→f}` with the factor's own potential.
    pub fn beliefs(&self, msgs: &MessageState<S>) -> BeliefSet<S> {
        self.beliefs_with_llrs(msgs, &self.belief_llrs(msgs))
    }

    fn beliefs_with_llrs(&self, msgs: &MessageState<S>, llrs: &[S]) -> BeliefSet<S> {
        let half = S::from_f64(0.5);
        let singles = llrs.iter().map(|&l| [l.sigmoid(), (-l).sigmoid()]).collect();
        let pairs = self
            .graph
            .edges()
            .iter()
            .enumerate()
            .map(|(e, edge)| {
                let ln = msgs.vn_to_fn[2 * e] * half;
                let lm = msgs.vn_to_fn[2 * e + 1] * half;
                let (an, am) = match self.rule {
                    UpdateRule::Neural => (self.shares[edge.n], self.shares[edge.m]),
                    _ => (S::zero(), S::zero()),
                };
                let un = an + ln;
                let um = am + lm;
                let z = [(0, 0), (0, 1), (1, 0), (1, 1)].map(|(i, j)| {
                    let (si, sj) = (spin(i), spin(j));
                    un * S::from_f64(si) + edge.coupling * S::from_f64(si * sj) + um * S::from_f64(sj)
                });
                let p = softmax(z);
                [[p[0], p[1]], [p[2], p[3]]]
            })
            .collect();
        BeliefSet { singles, pairs }
    }

    /// Runs `cfg.iterations` iterations from all-zero messages.
    pub fn run(&self, cfg: &RunConfig) -> RunOutput<S> {
        let mut msgs = MessageState::zeros(self.graph.num_edges());
        let mut history = Vec::new();
        let mut last_delta = f64::INFINITY;
        for _ in 0..cfg.iterations {
            last_delta = self.step(&mut msgs);
            if cfg.record_history {
                history.push(self.beliefs(&msgs));
            }
        }
        let llrs = self.belief_llrs(&msgs);
        let beliefs = self.beliefs_with_llrs(&msgs, &llrs);
        RunOutput {
            messages: msgs,
            beliefs,
            llrs,
            converged: last_delta < cfg.convergence_tol,
            history,
        }
    }
}

/// Runs message passing with `cfg` on `g`. Learned rules need `params`;
/// `side` features are appended to every network input.
pub fn run_message_passing<S: Scalar>(
    g: &PairwiseFactorGraph<S>,
    cfg: &RunConfig,
    params: Option<&MlpParams<S>>,
    side: &[S],
) -> Result<RunOutput<S>, ConfigError> {
    cfg.validate()?;
    let mp = MessagePasser::new(g, cfg.rule, cfg.momentum, params, side)?;
    Ok(mp.run(cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bethe::consistency_distance;
    use crate::neural::init_params;
    use crate::oracle::exact_marginals;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_term_sum_llr(e: f64, l_in: f64) -> f64 {
        // m(x) = Σ_y exp(E x y) · exp(L y / 2)
        let m = |x: f64| (e * x + l_in / 2.0).exp() + (-e * x - l_in / 2.0).exp();
        (m(1.0) / m(-1.0)).ln()
    }

    fn random_spin_glass(rng: &mut ChaCha8Rng, s: f64) -> PairwiseFactorGraph<f64> {
        let unary = (0..4).map(|_| rng.random_range(-s..=s)).collect();
        let c: Vec<f64> = (0..6).map(|_| rng.random_range(-s..=s)).collect();
        PairwiseFactorGraph::fully_connected(unary, &c).unwrap()
    }

    #[test]
    fn vn_update_examples() {
        assert_eq!(vn_update::<f64>(&[]), 0.0);
        assert_relative_eq!(vn_update(&[1.0, -0.3]), 0.7, epsilon = 1e-15);
        assert_eq!(vn_update(&[25.0, 25.0]), 30.0);
    }

    #[test]
    fn spa_fn_update_examples() {
        assert_eq!(spa_fn_update(0.5, 0.0), 0.0);
        assert_relative_eq!(spa_fn_update(1.0, 30.0), 2.0, epsilon = 1e-10);
        let v = two_term_sum_llr(1.0, 2.0);
        assert_relative_eq!(spa_fn_update(1.0, 2.0), v, epsilon = 1e-12);
        assert_relative_eq!(v, 1.32500, epsilon = 1e-5);
        for &(e, l) in &[(-1.7, 3.2), (0.3, -8.0), (2.0, 0.5)] {
            assert_relative_eq!(spa_fn_update(e, l), two_term_sum_llr(e, l), epsilon = 1e-10);
        }
    }

    #[test]
    fn unary_llr_examples() {
        let g = PairwiseFactorGraph::new(vec![0.0, 0.5, -2.0], &[]).unwrap();
        assert_eq!(unary_llr(&g, 0), 0.0);
        assert_eq!(unary_llr(&g, 1), 1.0);
        assert_eq!(unary_llr(&g, 2), -4.0);
    }

    #[test]
    fn single_edge_is_exact() {
        let g = PairwiseFactorGraph::new(vec![0.4, -1.3], &[(0, 1, 1.1)]).unwrap();
        let out = run_message_passing(&g, &RunConfig::default(), None, &[]).unwrap();
        let exact = exact_marginals(&g).unwrap();
        for n in 0..2 {
            assert_relative_eq!(out.beliefs.singles[n][0], exact.singles[n][0], epsilon = 1e-9);
        }
        for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            assert_relative_eq!(out.beliefs.pairs[0][i][j], exact.pairs[0][i][j], epsilon = 1e-9);
        }
        assert!(out.converged);
    }

    #[test]
    fn zero_graph_stays_at_zero() {
        let g = PairwiseFactorGraph::fully_connected(vec![0.0; 4], &[0.0; 6]).unwrap();
        let out = run_message_passing(&g, &RunConfig::default(), None, &[]).unwrap();
        assert!(out.messages.fn_to_vn.iter().all(|&m| m == 0.0));
        assert!(out.messages.vn_to_fn.iter().all(|&m| m == 0.0));
        assert!(out.beliefs.singles.iter().all(|s| *s == [0.5, 0.5]));
        assert!(out.beliefs.pairs.iter().all(|t| *t == [[0.25; 2]; 2]));
    }

    #[test]
    fn belief_readout_example() {
        // Variable 0 has unary 0.5 and incoming factor LLRs 1.0 and -0.3.
        let g = PairwiseFactorGraph::new(vec![0.5, 0.0, 0.0], &[(0, 1, 0.2), (0, 2, -0.4)]).unwrap();
        let mp = MessagePasser::new(&g, UpdateRule::Spa, 0.0, None, &[]).unwrap();
        let mut msgs = MessageState::zeros(2);
        msgs.fn_to_vn[0] = 1.0;
        msgs.fn_to_vn[2] = -0.3;
        let llr = mp.belief_llrs(&msgs)[0];
        assert_relative_eq!(llr, 1.7, epsilon = 1e-15);
        let b = mp.beliefs(&msgs);
        assert_relative_eq!(b.singles[0][0], 0.84553, epsilon = 1e-5);
        assert_relative_eq!(b.singles[0][0], 1.0 / (1.0 + (-1.7f64).exp()), epsilon = 1e-15);
    }

    #[test]
    fn neural_rules_need_matching_params() {
        let g = PairwiseFactorGraph::new(vec![0.0, 0.0], &[(0, 1, 1.0)]).unwrap();
        let cfg = RunConfig::with_rule(UpdateRule::Neural);
        assert!(matches!(
            run_message_passing(&g, &cfg, None, &[]),
            Err(ConfigError::MissingParams(_))
        ));
        let p2 = init_params(2, 0);
        assert!(matches!(
            run_message_passing(&g, &cfg, Some(&p2), &[]),
            Err(ConfigError::Arity { .. })
        ));
        let bad = RunConfig {
            momentum: 1.0,
            ..RunConfig::default()
        };
        assert!(run_message_passing(&g, &bad, None, &[]).is_err());
        let bad = RunConfig {
            iterations: 0,
            ..RunConfig::default()
        };
        assert!(run_message_passing(&g, &bad, None, &[]).is_err());
    }

    #[test]
    fn momentum_preserves_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut checked = 0;
        for _ in 0..200 {
            let g = random_spin_glass(&mut rng, 0.5);
            let mp = MessagePasser::new(&g, UpdateRule::Spa, 0.0, None, &[]).unwrap();
            let mut msgs = MessageState::zeros(g.num_edges());
            let mut d = f64::INFINITY;
            for _ in 0..500 {
                d = mp.step(&mut msgs);
                if d < 1e-14 {
                    break;
                }
            }
            if d >= 1e-14 {
                continue;
            }
            let damped = MessagePasser::new(&g, UpdateRule::Spa, 0.1, None, &[]).unwrap();
            let before = msgs.clone();
            damped.step(&mut msgs);
            for (a, b) in before.fn_to_vn.iter().zip(&msgs.fn_to_vn) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in before.vn_to_fn.iter().zip(&msgs.vn_to_fn) {
                assert!((a - b).abs() < 1e-12);
            }
            checked += 1;
        }
        assert!(checked > 100);
    }

    #[test]
    fn negating_unaries_negates_belief_llrs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let g = random_spin_glass(&mut rng, 3.0);
            let neg = PairwiseFactorGraph::new(
                g.unary().iter().map(|e| -e).collect(),
                &g.edges().iter().map(|e| (e.n, e.m, e.coupling)).collect::<Vec<_>>(),
            )
            .unwrap();
            let a = run_message_passing(&g, &RunConfig::default(), None, &[]).unwrap();
            let b = run_message_passing(&neg, &RunConfig::default(), None, &[]).unwrap();
            for (x, y) in a.llrs.iter().zip(&b.llrs) {
                assert_eq!(*x, -*y);
            }
        }
    }

    #[test]
    fn converged_runs_are_locally_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut seen = 0;
        for _ in 0..300 {
            let g = random_spin_glass(&mut rng, 1.0);
            let cfg = RunConfig {
                iterations: 200,
                ..RunConfig::default()
            };
            let out = run_message_passing(&g, &cfg, None, &[]).unwrap();
            if out.converged {
                seen += 1;
                assert!(consistency_distance(&g, &out.beliefs) < 1e-6);
            }
        }
        assert!(seen > 100);
    }

    #[test]
    fn messages_stay_clamped_on_strong_glasses() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = init_params(5, 2);
        for i in 0..10_000 {
            let g = random_spin_glass(&mut rng, 3.0);
            let rule = if i % 2 == 0 { UpdateRule::Spa } else { UpdateRule::Neural };
            let params = (rule == UpdateRule::Neural).then_some(&p);
            let out = run_message_passing(&g, &RunConfig::with_rule(rule), params, &[]).unwrap();
            for &m in out.messages.fn_to_vn.iter().chain(&out.messages.vn_to_fn) {
                assert!(m.is_finite() && m.abs() <= LLR_CLAMP);
            }
        }
    }

    #[test]
    fn history_has_one_entry_per_iteration() {
        let g = PairwiseFactorGraph::fully_connected(vec![0.1, 0.2, 0.3, 0.4], &[0.5; 6]).unwrap();
        let cfg = RunConfig {
            iterations: 7,
            record_history: true,
            ..RunConfig::default()
        };
        let out = run_message_passing(&g, &cfg, None, &[]).unwrap();
        assert_eq!(out.history.len(), 7);
        assert_eq!(out.history.last().unwrap(), &out.beliefs);
        assert_eq!(out.messages.iteration, 7);
    }

    #[test]
    fn shared_parameter_instance() {
        let g = PairwiseFactorGraph::fully_connected(vec![0.1; 4], &[0.5; 6]).unwrap();
        let p = init_params(5, 1);
        let mp = MessagePasser::new(&g, UpdateRule::Neural, 0.0, Some(&p), &[]).unwrap();
        assert!(std::ptr::eq(mp.shared_params().unwrap(), &p));
    }
}
