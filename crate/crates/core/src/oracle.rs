//! Exact inference by enumerating all `2^N` assignments.
//!
//! This is the ground truth for marginals, the partition function and the
//! KL metric. It is exponential in `N` and refuses graphs above
//! [`MAX_ORACLE_VARS`].

use crate::beliefs::{kl_divergence, MarginalSet};
use crate::error::OracleError;
use crate::graph::{Assignment, PairwiseFactorGraph};
use crate::scalar::Scalar;

pub const MAX_ORACLE_VARS: usize = 25;

fn check_capacity<S: Scalar>(g: &PairwiseFactorGraph<S>) -> Result<(), OracleError> {
    if g.num_vars() > MAX_ORACLE_VARS {
        Err(OracleError::Capacity {
            n: g.num_vars(),
            max: MAX_ORACLE_VARS,
        })
    } else {
        Ok(())
    }
}

/// `Σ_n E_n a_n + Σ_(n,m) E_nm a_n a_m`.
pub fn log_joint_unnormalized<S: Scalar>(g: &PairwiseFactorGraph<S>, a: &Assignment) -> S {
    let x = a.spins();
    let mut s = S::zero();
    for (n, &e) in g.unary().iter().enumerate() {
        s += e * S::from_f64(x[n] as f64);
    }
    for e in g.edges() {
        s += e.coupling * S::from_f64((x[e.n] * x[e.m]) as f64);
    }
    s
}

fn log_weights(g: &PairwiseFactorGraph<f64>) -> impl Iterator<Item = (u64, f64)> + '_ {
    let n = g.num_vars();
    (0..1u64 << n).map(move |i| {
        let a = Assignment::from_index(i, n);
        (i, log_joint_unnormalized(g, &a))
    })
}

/// `ln Z`, computed with a max shift.
pub fn partition_function_log<S: Scalar>(g: &PairwiseFactorGraph<S>) -> Result<S, OracleError> {
    check_capacity(g)?;
    let n = g.num_vars();
    let lw: Vec<S> = (0..1u64 << n)
        .map(|i| log_joint_unnormalized(g, &Assignment::from_index(i, n)))
        .collect();
    Ok(crate::scalar::log_sum_exp(&lw))
}

/// Exact singleton and pairwise marginals.
pub fn exact_marginals(g: &PairwiseFactorGraph<f64>) -> Result<MarginalSet<f64>, OracleError> {
    check_capacity(g)?;
    let max = log_weights(g).map(|(_, w)| w).fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    let mut singles = vec![[0.0; 2]; g.num_vars()];
    let mut pairs = vec![[[0.0; 2]; 2]; g.num_edges()];
    for (i, lw) in log_weights(g) {
        let w = (lw - max).exp();
        z += w;
        let bit = |n: usize| (i >> n & 1) as usize;
        for (n, s) in singles.iter_mut().enumerate() {
            s[bit(n)] += w;
        }
        for (e, edge) in g.edges().iter().enumerate() {
            pairs[e][bit(edge.n)][bit(edge.m)] += w;
        }
    }
    for s in &mut singles {
        s.iter_mut().for_each(|v| *v /= z);
    }
    for t in &mut pairs {
        t.iter_mut().flatten().for_each(|v| *v /= z);
    }
    Ok(MarginalSet { singles, pairs })
}

/// Exact posterior LLRs `ln p(x_n=+1) - ln p(x_n=-1)`, computed entirely in
/// the log domain so saturated marginals keep their magnitude.
pub fn exact_llrs(g: &PairwiseFactorGraph<f64>) -> Result<Vec<f64>, OracleError> {
    check_capacity(g)?;
    let n = g.num_vars();
    let mut max = vec![[f64::NEG_INFINITY; 2]; n];
    for (i, lw) in log_weights(g) {
        for (v, m) in max.iter_mut().enumerate() {
            let b = (i >> v & 1) as usize;
            m[b] = m[b].max(lw);
        }
    }
    let mut sum = vec![[0.0; 2]; n];
    for (i, lw) in log_weights(g) {
        for v in 0..n {
            let b = (i >> v & 1) as usize;
            sum[v][b] += (lw - max[v][b]).exp();
        }
    }
    Ok((0..n)
        .map(|v| (sum[v][0].ln() + max[v][0]) - (sum[v][1].ln() + max[v][1]))
        .collect())
}

/// `(1/N) Σ_n KL(b_n ‖ p_n)` against the exact marginals.
pub fn mean_kl_to_exact(
    g: &PairwiseFactorGraph<f64>,
    singles: &[[f64; 2]],
) -> Result<f64, OracleError> {
    let exact = exact_marginals(g)?;
    Ok(mean_kl(singles, &exact.singles))
}

/// `(1/N) Σ_n KL(b_n ‖ p_n)` for precomputed marginals.
pub fn mean_kl(singles: &[[f64; 2]], exact: &[[f64; 2]]) -> f64 {
    let total: f64 = singles
        .iter()
        .zip(exact)
        .map(|(b, p)| kl_divergence(b, p))
        .sum();
    total / singles.len() as f64
}
