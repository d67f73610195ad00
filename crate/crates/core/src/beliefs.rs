//! Singleton and pairwise distributions over binary spins.
//!
//! Index 0 of every array is the state `+1`, index 1 is `-1`. A pair table
//! `pairs[e][i][j]` is `b(x_n = s_i, x_m = s_j)` for edge `e = (n, m)`.

use crate::scalar::Scalar;

/// Spin value of state index `i` (0 → +1, 1 → -1).
pub const fn spin(i: usize) -> f64 {
    if i == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Singleton and pairwise beliefs; also used for exact marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefSet<S> {
    pub singles: Vec<[S; 2]>,
    pub pairs: Vec<[[S; 2]; 2]>,
}

/// Exact marginals share the belief layout.
pub type MarginalSet<S> = BeliefSet<S>;

impl<S: Scalar> BeliefSet<S> {
    pub fn uniform(num_vars: usize, num_edges: usize) -> Self {
        let h = S::from_f64(0.5);
        let q = S::from_f64(0.25);
        Self {
            singles: vec![[h, h]; num_vars],
            pairs: vec![[[q, q], [q, q]]; num_edges],
        }
    }

    /// Belief LLR `ln b(+1) - ln b(-1)` of variable `n`.
    pub fn single_llr(&self, n: usize) -> S {
        let [p, q] = self.singles[n];
        p.floor_at(PROB_FLOOR).ln() - q.floor_at(PROB_FLOOR).ln()
    }

    /// Drops the tape, keeping primal values.
    pub fn values(&self) -> BeliefSet<f64> {
        BeliefSet {
            singles: self
                .singles
                .iter()
                .map(|s| s.map(|v| v.value()))
                .collect(),
            pairs: self
                .pairs
                .iter()
                .map(|p| p.map(|r| r.map(|v| v.value())))
                .collect(),
        }
    }

    /// Row marginal `Σ_{x_m} b_nm(·, x_m)` of edge `e`.
    pub fn row_marginal(&self, e: usize) -> [S; 2] {
        let t = self.pairs[e];
        [t[0][0] + t[0][1], t[1][0] + t[1][1]]
    }

    /// Column marginal `Σ_{x_n} b_nm(x_n, ·)` of edge `e`.
    pub fn col_marginal(&self, e: usize) -> [S; 2] {
        let t = self.pairs[e];
        [t[0][0] + t[1][0], t[0][1] + t[1][1]]
    }
}

impl BeliefSet<f64> {
    /// Largest deviation from normalization over singles and pair tables.
    pub fn normalization_error(&self) -> f64 {
        let s = self
            .singles
            .iter()
            .map(|b| (b[0] + b[1] - 1.0).abs())
            .fold(0.0, f64::max);
        let p = self
            .pairs
            .iter()
            .map(|t| (t[0][0] + t[0][1] + t[1][0] + t[1][1] - 1.0).abs())
            .fold(0.0, f64::max);
        s.max(p)
    }
}

/// Probabilities are floored here before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// `(p(+1), p(-1))` for a log-likelihood ratio.
pub fn llr_to_distribution<S: Scalar>(llr: S) -> [S; 2] {
    [llr.sigmoid(), (-llr).sigmoid()]
}

/// `KL(b ‖ p)` in nats over a common finite support. Terms with `b = 0`
/// contribute nothing; `p = 0` where `b > 0` yields `+∞`.
pub fn kl_divergence(b: &[f64], p: &[f64]) -> f64 {
    assert_eq!(b.len(), p.len(), "distributions must share a support");
    b.iter()
        .zip(p)
        .map(|(&bi, &pi)| {
            if bi == 0.0 {
                0.0
            } else if pi == 0.0 {
                f64::INFINITY
            } else {
                bi * (bi / pi).ln()
            }
        })
        .sum()
}

/// Differentiable binary KL with both arguments floored at [`PROB_FLOOR`].
pub fn kl_binary<S: Scalar>(b: [S; 2], p: [S; 2]) -> S {
    let mut acc = S::zero();
    for i in 0..2 {
        let bi = b[i].floor_at(PROB_FLOOR);
        let pi = p[i].floor_at(PROB_FLOOR);
        acc += bi * (bi.ln() - pi.ln());
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.5, 0.5], &[0.5, 0.5]), 0.0);
        let v = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert_relative_eq!(kl_divergence(&[0.9, 0.1], &[0.5, 0.5]), v, epsilon = 1e-15);
        assert_relative_eq!(v, 0.36806, epsilon = 1e-5);
        assert_relative_eq!(kl_divergence(&[1.0, 0.0], &[0.5, 0.5]), 2f64.ln(), epsilon = 1e-15);
        assert_eq!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]), f64::INFINITY);
    }

    #[test]
    fn llr_distribution_examples() {
        assert_eq!(llr_to_distribution(0.0), [0.5, 0.5]);
        let [p, q] = llr_to_distribution(30.0);
        assert_relative_eq!(p, 1.0, epsilon = 1e-12);
        assert_relative_eq!(q, 9.357622968840175e-14, max_relative = 1e-9);
        for &l in &[-12.5, -1.0, 0.3, 7.0] {
            let [p, q] = llr_to_distribution(l);
            assert_relative_eq!((p / q).ln(), l, epsilon = 1e-10);
        }
    }

    #[test]
    fn marginals_of_pair_tables() {
        let mut b = BeliefSet::<f64>::uniform(2, 1);
        b.pairs[0] = [[0.1, 0.2], [0.3, 0.4]];
        assert_eq!(b.row_marginal(0), [0.30000000000000004, 0.7]);
        assert_eq!(b.col_marginal(0), [0.4, 0.6000000000000001]);
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(a in 1e-6f64..1.0, c in 1e-6f64..1.0) {
            let b = [a, 1.0 - a];
            let p = [c, 1.0 - c];
            prop_assert!(kl_divergence(&b, &p) >= -1e-15);
            prop_assert!(kl_binary(b, p) >= -1e-12);
        }
    }
}
