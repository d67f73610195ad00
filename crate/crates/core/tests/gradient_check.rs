use cycbp::neural::init_params;
use cycbp::rng::{substream, DOMAIN_EVAL};
use cycbp::training::*;
use rand::Rng;

const H: f64 = 1e-5;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Worst norm-wise relative error between tape gradients and central
/// differences over 20 random (graph, parameters) pairs.
fn worst_relative_error(loss: LossKind) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..20u64 {
        let mode = if k % 2 == 0 { Mode::NonExtrinsic } else { Mode::Extrinsic };
        let task = if loss == LossKind::Bmi { Task::Channel } else { Task::Ising };
        let cfg = TrainConfig { loss, mode, task, ..TrainConfig::default() };
        let ex = sample_training_example(&cfg, 77, DOMAIN_EVAL, k);
        let init_seed = substream(78, DOMAIN_EVAL, k).random::<u64>();
        let params = init_params(cfg.n_in(), init_seed).with_odd_symmetry(k % 4 >= 2);
        let obj = cfg.objective();

        let (_, grad) = example_loss_and_grad(&params, &ex, &obj).unwrap();
        let flat = params.to_flat();
        let fd: Vec<f64> = (0..flat.len())
            .map(|i| {
                let eval = |delta: f64| {
                    let mut f = flat.clone();
                    f[i] += delta;
                    let p = params.with_flat(&f).unwrap();
                    example_loss(&p, &ex, &obj).unwrap()
                };
                (eval(H) - eval(-H)) / (2.0 * H)
            })
            .collect();
        let diff: Vec<f64> = grad.iter().zip(&fd).map(|(a, b)| a - b).collect();
        let rel = norm(&diff) / norm(&fd).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn kl_gradient_matches_finite_differences() {
    let e = worst_relative_error(LossKind::Kl);
    assert!(e < 1e-4, "relative error {e:e}");
}

#[test]
fn bethe_gradient_matches_finite_differences() {
    let e = worst_relative_error(LossKind::Bethe);
    assert!(e < 1e-4, "relative error {e:e}");
}

#[test]
fn bmi_gradient_matches_finite_differences() {
    let e = worst_relative_error(LossKind::Bmi);
    assert!(e < 1e-4, "relative error {e:e}");
}
