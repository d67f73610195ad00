//! Double-loop concave-convex minimization of the Bethe free energy over the
//! local polytope.
//!
//! The free energy is split as `F = F_vex + F_cave` with
//! `F_vex = Σ_e Σ b_e ln(b_e/φ_e) + Σ_n Σ b_n ln(b_n/ψ_n)` and
//! `F_cave = -Σ_n d_n Σ b_n ln(b_n/ψ_n)`. Each outer iteration linearizes
//! `F_cave` at the current singles `b^t` and minimizes the convex remainder
//! under the marginalization constraints. With one multiplier `η` per
//! directed slot, stationarity gives
//!
//! ```text
//! b_e(x_n, x_m) ∝ φ_e exp(η_{e→n} x_n / 2 + η_{e→m} x_m / 2)
//! b_n(x_n)      ∝ ψ_n (b^t_n / ψ_n)^{d_n} exp(-Σ_e η_{e→n} x_n / 2)
//! ```
//!
//! and the multipliers minimize the smooth convex dual
//! `Σ_e ln Z_e(η) + Σ_n ln Z_n(η)`. The inner loop takes damped Newton steps
//! on that dual; its gradient is the mismatch between pair-table and
//! singleton means, so a converged inner loop lands on the local polytope.
//! Multipliers carry over between outer iterations.

use crate::beliefs::{spin, BeliefSet};
use crate::bethe::bethe_free_energy;
use crate::error::ConfigError;
use crate::graph::PairwiseFactorGraph;
use crate::scalar::log_sum_exp;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CccpConfig {
    pub outer_iters: usize,
    pub inner_iters: usize,
    /// Lower bound on probabilities carried between outer iterations.
    pub floor: f64,
}

impl Default for CccpConfig {
    fn default() -> Self {
        Self {
            outer_iters: 25,
            inner_iters: 25,
            floor: 1e-12,
        }
    }
}

impl CccpConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.outer_iters == 0 || self.inner_iters == 0 {
            return Err(ConfigError::Invalid(
                "CCCP needs at least one outer and one inner iteration".into(),
            ));
        }
        if !(self.floor > 0.0 && self.floor < 0.5) {
            return Err(ConfigError::Invalid(format!(
                "floor must lie in (0, 0.5), got {}",
                self.floor
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CccpOutput {
    pub beliefs: BeliefSet<f64>,
    /// Free energy of the starting point followed by one entry per outer
    /// iteration.
    pub trace: Vec<f64>,
}

fn log_normalize(v: [f64; 2]) -> [f64; 2] {
    let z = log_sum_exp(&v);
    [v[0] - z, v[1] - z]
}

struct Dual<'a> {
    g: &'a PairwiseFactorGraph<f64>,
    log_phi: Vec<[[f64; 2]; 2]>,
    log_psi: Vec<[f64; 2]>,
    eta: Vec<f64>,
}

impl<'a> Dual<'a> {
    fn new(g: &'a PairwiseFactorGraph<f64>) -> Self {
        let log_psi: Vec<[f64; 2]> = g.unary().iter().map(|&e| [e, -e]).collect();
        let log_phi = g
            .edges()
            .iter()
            .map(|edge| {
                let mut t = [[0.0; 2]; 2];
                for (i, row) in t.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = log_psi[edge.n][i]
                            + edge.coupling * spin(i) * spin(j)
                            + log_psi[edge.m][j];
                    }
                }
                t
            })
            .collect();
        Self {
            g,
            log_phi,
            log_psi,
            eta: vec![0.0; 2 * g.num_edges()],
        }
    }

    fn base(&self, log_bt: &[[f64; 2]]) -> Vec<[f64; 2]> {
        (0..self.g.num_vars())
            .map(|n| {
                let d = self.g.variable_degree(n) as f64;
                let p = self.log_psi[n];
                [p[0] + d * (log_bt[n][0] - p[0]), p[1] + d * (log_bt[n][1] - p[1])]
            })
            .collect()
    }

    fn single_logits(&self, base: &[[f64; 2]], eta: &[f64], n: usize) -> [f64; 2] {
        let h: f64 = self
            .g
            .incident(n)
            .iter()
            .map(|inc| eta[2 * inc.edge + inc.side])
            .sum::<f64>()
            * 0.5;
        [base[n][0] - h, base[n][1] + h]
    }

    fn pair_logits(&self, eta: &[f64], e: usize) -> [f64; 4] {
        let (a, b) = (0.5 * eta[2 * e], 0.5 * eta[2 * e + 1]);
        let t = &self.log_phi[e];
        [t[0][0] + a + b, t[0][1] + a - b, t[1][0] - a + b, t[1][1] - a - b]
    }

    fn objective(&self, base: &[[f64; 2]], eta: &[f64]) -> f64 {
        let edges: f64 = (0..self.g.num_edges())
            .map(|e| log_sum_exp(&self.pair_logits(eta, e)))
            .sum();
        let nodes: f64 = (0..self.g.num_vars())
            .map(|n| log_sum_exp(&self.single_logits(base, eta, n)))
            .sum();
        edges + nodes
    }

    fn pair_table(&self, e: usize) -> [[f64; 2]; 2] {
        let z = self.pair_logits(&self.eta, e);
        let lz = log_sum_exp(&z);
        let p = z.map(|v| (v - lz).exp());
        [[p[0], p[1]], [p[2], p[3]]]
    }

    fn single(&self, base: &[[f64; 2]], n: usize) -> [f64; 2] {
        log_normalize(self.single_logits(base, &self.eta, n)).map(f64::exp)
    }

    /// One damped Newton step; returns false once the gradient vanishes.
    fn newton_step(&mut self, base: &[[f64; 2]]) -> bool {
        let k = self.eta.len();
        if k == 0 {
            return false;
        }
        let mut grad = vec![0.0; k];
        let mut hess = vec![0.0; k * k];
        for e in 0..self.g.num_edges() {
            let p = self.pair_table(e);
            let mn = p[0][0] + p[0][1] - p[1][0] - p[1][1];
            let mm = p[0][0] + p[1][0] - p[0][1] - p[1][1];
            let corr = p[0][0] - p[0][1] - p[1][0] + p[1][1];
            let (a, b) = (2 * e, 2 * e + 1);
            grad[a] += 0.5 * mn;
            grad[b] += 0.5 * mm;
            hess[a * k + a] += 0.25 * (1.0 - mn * mn);
            hess[b * k + b] += 0.25 * (1.0 - mm * mm);
            let c = 0.25 * (corr - mn * mm);
            hess[a * k + b] += c;
            hess[b * k + a] += c;
            
        }
        for n in 0..self.g.num_vars() {
            let b = self.single(base, n);
            let m = b[0] - b[1];
            let var = 0.25 * (1.0 - m * m);
            let inc = self.g.incident(n);
            for i in inc {
                let a = 2 * i.edge + i.side;
                grad[a] -= 0.5 * m;
                for j in inc {
                    let c = 2 * j.edge + j.side;
                    hess[a * k + c] += var;
                }
            }
        }
        let gmax = grad.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if gmax < 1e-15 {
            return false;
        }
        let ridge = 1e-12 * (0..k).map(|i| hess[i * k + i]).fold(0.0, f64::max) + 1e-300;
        for i in 0..k {
            hess[i * k + i] += ridge;
        }
        let Some(step) = solve_spd(&mut hess, &grad, k) else {
            return false;
        };
        let f0 = self.objective(base, &self.eta);
        // Near the optimum objective differences drop below f64 resolution.
        let slack = 8.0 * f64::EPSILON * f0.abs().max(1.0);
        let slope: f64 = -grad.iter().zip(&step).map(|(g, s)| g * s).sum::<f64>();
        let mut t = 1.0;
        let mut trial = vec![0.0; k];
        for _ in 0..40 {
            for ((tr, &e), &s) in trial.iter_mut().zip(&self.eta).zip(&step) {
                *tr = e - t * s;
            }
            if self.objective(base, &trial) <= f0 + 1e-4 * t * slope + slack {
                self.eta.copy_from_slice(&trial);
                return true;
            }
            t *= 0.5;
        }
        false
    }

    fn beliefs(&self, base: &[[f64; 2]]) -> BeliefSet<f64> {
        BeliefSet {
            singles: (0..self.g.num_vars()).map(|n| self.single(base, n)).collect(),
            pairs: (0..self.g.num_edges()).map(|e| self.pair_table(e)).collect(),
        }
    }
}

/// Solves `A x = b` for symmetric positive definite `A` (row-major, `k × k`)
/// by Cholesky; `A` is overwritten.
fn solve_spd(a: &mut [f64], b: &[f64], k: usize) -> Option<Vec<f64>> {
    for j in 0..k {
        let mut d = a[j * k + j];
        for p in 0..j {
            d -= a[j * k + p] * a[j * k + p];
        }
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        a[j * k + j] = d;
        for i in j + 1..k {
            let mut s = a[i * k + j];
            for p in 0..j {
                s -= a[i * k + p] * a[j * k + p];
            }
            a[i * k + j] = s / d;
        }
    }
    let mut y = b.to_vec();
    for i in 0..k {
        for p in 0..i {
            y[i] -= a[i * k + p] * y[p];
        }
        y[i] /= a[i * k + i];
    }
    for i in (0..k).rev() {
        for p in i + 1..k {
            y[i] -= a[p * k + i] * y[p];
        }
        y[i] /= a[i * k + i];
    }
    Some(y)
}

/// Runs the double loop from uniform singles.
pub fn cccp_minimize(
    g: &PairwiseFactorGraph<f64>,
    cfg: &CccpConfig,
) -> Result<CccpOutput, ConfigError> {
    let uniform = vec![[0.5; 2]; g.num_vars()];
    cccp_minimize_from(g, cfg, &uniform)
}

/// Runs the double loop from the given singleton beliefs, with zero
/// multipliers. The first trace entry is the free energy of the starting
/// point with outer-product pair tables.
pub fn cccp_minimize_from(
    g: &PairwiseFactorGraph<f64>,
    cfg: &CccpConfig,
    init: &[[f64; 2]],
) -> Result<CccpOutput, ConfigError> {
    cfg.validate()?;
    if init.len() != g.num_vars() {
        return Err(ConfigError::Invalid(format!(
            "initial beliefs cover {} variables, graph has {}",
            init.len(),
            g.num_vars()
        )));
    }
    let ln_floor = cfg.floor.ln();
    let mut log_bt: Vec<[f64; 2]> = init
        .iter()
        .map(|b| log_normalize([b[0].max(cfg.floor).ln(), b[1].max(cfg.floor).ln()]))
        .collect();
    let singles: Vec<[f64; 2]> = log_bt.iter().map(|l| l.map(f64::exp)).collect();
    let pairs = g
        .edges()
        .iter()
        .map(|e| {
            let (a, b) = (singles[e.n], singles[e.m]);
            [[a[0] * b[0], a[0] * b[1]], [a[1] * b[0], a[1] * b[1]]]
        })
        .collect();
    let mut beliefs = BeliefSet { singles, pairs };
    let mut trace = vec![bethe_free_energy(g, &beliefs)];
    let mut dual = Dual::new(g);
    for _ in 0..cfg.outer_iters {
        let base = dual.base(&log_bt);
        for _ in 0..cfg.inner_iters {
            if !dual.newton_step(&base) {
                break;
            }
        }
        beliefs = dual.beliefs(&base);
        log_bt = (0..g.num_vars())
            .map(|n| log_normalize(dual.single_logits(&base, &dual.eta, n)).map(|v| v.max(ln_floor)))
            .collect();
        trace.push(bethe_free_energy(g, &beliefs));
    }
    Ok(CccpOutput { beliefs, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bethe::consistency_distance;
    use crate::oracle::{exact_marginals, partition_function_log};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_glass(rng: &mut ChaCha8Rng, s: f64) -> PairwiseFactorGraph<f64> {
        let u = (0..4).map(|_| rng.random_range(-s..=s)).collect();
        let c: Vec<f64> = (0..6).map(|_| rng.random_range(-s..=s)).collect();
        PairwiseFactorGraph::fully_connected(u, &c).unwrap()
    }

    #[test]
    fn cholesky_solves_small_system() {
        let mut a = vec![4.0, 2.0, 2.0, 3.0];
        let x = solve_spd(&mut a, &[2.0, 1.0], 2).unwrap();
        assert_relative_eq!(x[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(x[1], 0.0, epsilon = 1e-15);
        let mut singular = vec![1.0, 1.0, 1.0, 1.0];
        assert!(solve_spd(&mut singular, &[1.0, 1.0], 2).is_none());
    }

    #[test]
    fn zero_graph_keeps_uniform_beliefs() {
        let g = PairwiseFactorGraph::fully_connected(vec![0.0; 4], &[0.0; 6]).unwrap();
        let out = cccp_minimize(&g, &CccpConfig::default()).unwrap();
        for s in &out.beliefs.singles {
            assert_relative_eq!(s[0], 0.5, epsilon = 1e-14);
        }
        assert_relative_eq!(*out.trace.last().unwrap(), -4.0 * 2f64.ln(), epsilon = 1e-12);
        assert_eq!(out.trace.len(), 26);
    }

    #[test]
    fn trees_reach_exact_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let n = rng.random_range(2..=6);
            let unary = (0..n).map(|_| rng.random_range(-2.0..=2.0)).collect();
            let edges: Vec<(usize, usize, f64)> = (1..n)
                .map(|m| (rng.random_range(0..m), m, rng.random_range(-2.0..=2.0)))
                .collect();
            let g = PairwiseFactorGraph::new(unary, &edges).unwrap();
            // The outer loop converges linearly; 25 iterations leave errors
            // of order 1e-3 on strongly coupled trees.
            let cfg = CccpConfig {
                outer_iters: 400,
                ..CccpConfig::default()
            };
            let out = cccp_minimize(&g, &cfg).unwrap();
            let exact = exact_marginals(&g).unwrap();
            for v in 0..n {
                assert_relative_eq!(out.beliefs.singles[v][0], exact.singles[v][0], epsilon = 1e-6);
            }
            assert_relative_eq!(
                *out.trace.last().unwrap(),
                -partition_function_log(&g).unwrap(),
                epsilon = 1e-6
            );
        }
    }

    #[test]
    fn trace_is_monotone_and_final_beliefs_feasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let g = random_glass(&mut rng, 3.0);
            let out = cccp_minimize(&g, &CccpConfig::default()).unwrap();
            for w in out.trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "trace increased: {:?}", out.trace);
            }
            assert!(out.beliefs.normalization_error() < 1e-12);
            assert!(consistency_distance(&g, &out.beliefs) < 1e-5);
        }
    }

    #[test]
    fn antiferromagnetic_minimum_is_unique() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(theta, j) in &[(0.0, -1.0), (0.5, -2.0), (-1.5, -0.5), (1.0, -1.5)] {
            let g = PairwiseFactorGraph::fully_connected(vec![theta; 4], &[j; 6]).unwrap();
            let cfg = CccpConfig {
                outer_iters: 200,
                ..CccpConfig::default()
            };
            let reference = *cccp_minimize(&g, &cfg).unwrap().trace.last().unwrap();
            for _ in 0..5 {
                let init: Vec<[f64; 2]> = (0..4)
                    .map(|_| {
                        let p = rng.random_range(0.05..0.95);
                        [p, 1.0 - p]
                    })
                    .collect();
                let f = *cccp_minimize_from(&g, &cfg, &init).unwrap().trace.last().unwrap();
                assert_relative_eq!(f, reference, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn isolated_variables_keep_their_unary() {
        let g = PairwiseFactorGraph::new(vec![0.7, 0.2, -0.4], &[(1, 2, 0.5)]).unwrap();
        let out = cccp_minimize(&g, &CccpConfig::default()).unwrap();
        let exact = exact_marginals(&g).unwrap();
        assert_relative_eq!(out.beliefs.singles[0][0], exact.singles[0][0], epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_configs() {
        let g = PairwiseFactorGraph::new(vec![0.0], &[]).unwrap();
        let bad = CccpConfig {
            inner_iters: 0,
            ..CccpConfig::default()
        };
        assert!(cccp_minimize(&g, &bad).is_err());
        assert!(cccp_minimize_from(&g, &CccpConfig::default(), &[]).is_err());
    }
}
