use cycbp::bethe::{bethe_free_energy, consistency_distance};
use cycbp::oracle::{exact_marginals, partition_function_log};
use cycbp::rng::{substream, DOMAIN_EVAL};
use cycbp::training::sample_random_tree;
use cycbp::{run_message_passing, BeliefSet, PairwiseFactorGraph, RunConfig};
use rand::Rng;

fn random_trees(count: u64) -> impl Iterator<Item = PairwiseFactorGraph<f64>> {
    (0..count).map(|i| {
        let mut rng = substream(11, DOMAIN_EVAL, i);
        let n = rng.random_range(1..=8);
        sample_random_tree(2.0, n, &mut rng)
    })
}

fn max_abs_diff(a: &BeliefSet<f64>, b: &BeliefSet<f64>) -> f64 {
    let singles = a.singles.iter().zip(&b.singles).flat_map(|(x, y)| (0..2).map(move |i| (x[i] - y[i]).abs()));
    let pairs = a
        .pairs
        .iter()
        .zip(&b.pairs)
        .flat_map(|(x, y)| (0..4).map(move |k| (x[k / 2][k % 2] - y[k / 2][k % 2]).abs()));
    singles.chain(pairs).fold(0.0, f64::max)
}

#[test]
fn spa_is_exact_on_trees() {
    for g in random_trees(200) {
        let out = run_message_passing(&g, &RunConfig::default(), None, &[]).unwrap();
        let exact = exact_marginals(&g).unwrap();
        let err = max_abs_diff(&out.beliefs, &exact);
        assert!(err < 1e-9, "error {err:e} on\n{}", g.to_text());
    }
}

#[test]
fn bethe_energy_at_exact_marginals_is_minus_log_z_on_trees() {
    for g in random_trees(200) {
        let exact = exact_marginals(&g).unwrap();
        let f = bethe_free_energy(&g, &exact);
        let log_z = partition_function_log(&g).unwrap();
        assert!((f + log_z).abs() < 1e-9, "F={f} ln Z={log_z}");
        assert!(consistency_distance(&g, &exact).abs() < 1e-12);
    }
}

#[test]
fn uniform_beliefs_on_zero_graph() {
    let g = PairwiseFactorGraph::fully_connected(vec![0.0; 4], &[0.0; 6]).unwrap();
    let f = bethe_free_energy(&g, &BeliefSet::uniform(4, 6));
    assert!((f + 4.0 * 2f64.ln()).abs() < 1e-12);
}

#[test]
fn spa_fixed_point_is_stationary_on_trees() {
    let cfg = RunConfig { iterations: 40, ..RunConfig::default() };
    for g in random_trees(50) {
        let out = run_message_passing(&g, &cfg, None, &[]).unwrap();
        assert!(out.converged);
        assert!(consistency_distance(&g, &out.beliefs) < 1e-12);
    }
}
