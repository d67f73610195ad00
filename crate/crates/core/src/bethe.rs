//! Bethe free energy and the distance of a belief set from the local
//! polytope.

use crate::beliefs::{kl_binary, spin, BeliefSet, PROB_FLOOR};
use crate::graph::PairwiseFactorGraph;
use crate::scalar::Scalar;

fn xlogx_over<S: Scalar>(b: S, log_factor: S) -> S {
    b * (b.floor_at(PROB_FLOOR).ln() - log_factor)
}

/// `Σ_e Σ b_nm ln(b_nm / φ_nm) - Σ_n (d_n - 1) Σ b_n ln(b_n / ψ_n)` with
/// `φ_nm = ψ_n ψ_nm ψ_m`, in nats. Probabilities are floored inside the
/// logarithms.
pub fn bethe_free_energy<S: Scalar>(g: &PairwiseFactorGraph<S>, b: &BeliefSet<S>) -> S {
    let mut f = S::zero();
    for (e, edge) in g.edges().iter().enumerate() {
        let (en, em) = (g.unary()[edge.n], g.unary()[edge.m]);
        for i in 0..2 {
            for j in 0..2 {
                let (si, sj) = (spin(i), spin(j));
                let log_phi = en * S::from_f64(si)
                    + edge.coupling * S::from_f64(si * sj)
                    + em * S::from_f64(sj);
                f += xlogx_over(b.pairs[e][i][j], log_phi);
            }
        }
    }
    for n in 0..g.num_vars() {
        let d = g.variable_degree(n) as f64;
        if d == 1.0 {
            continue;
        }
        let mut h = S::zero();
        for i in 0..2 {
            h += xlogx_over(b.singles[n][i], g.unary()[n] * S::from_f64(spin(i)));
        }
        f += -S::from_f64(d - 1.0) * h;
    }
    f
}

/// `Σ_e KL(Σ_{x_m} b_nm ‖ b_n) + KL(Σ_{x_n} b_nm ‖ b_m)`; zero exactly on the
/// local polytope.
pub fn consistency_distance<S: Scalar>(g: &PairwiseFactorGraph<S>, b: &BeliefSet<S>) -> S {
    let mut acc = S::zero();
    for (e, edge) in g.edges().iter().enumerate() {
        acc += kl_binary(b.row_marginal(e), b.singles[edge.n]);
        acc += kl_binary(b.col_marginal(e), b.singles[edge.m]);
    }
    acc
}
