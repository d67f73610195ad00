//! Losses, data samplers and the optimization loop for the shared update
//! network.
//!
//! A training step samples a fresh batch, unrolls `T` message-passing
//! iterations per example on a gradient tape, evaluates the loss on the final
//! beliefs and takes one Adam step on the mean gradient. Examples are
//! evaluated in parallel; per-example losses and gradients are reduced in
//! index order so results do not depend on the number of workers.

use rand::Rng;
use rayon::prelude::*;

use crate::beliefs::{kl_binary, llr_to_distribution, BeliefSet};
use crate::bethe::{bethe_free_energy, consistency_distance};
use crate::channel::{sample_detection_problem, BLOCK_LEN, MEMORY};
use crate::error::{ConfigError, TrainError};
use crate::graph::PairwiseFactorGraph;
use crate::neural::{init_params, MlpParams};
use crate::oracle::exact_marginals;
use crate::rng::{substream, DOMAIN_INIT, DOMAIN_TRAIN, DOMAIN_VALIDATION};
use crate::scalar::{pairwise_mean, pairwise_sum, Scalar};
use crate::spa::{MessagePasser, MessageState, UpdateRule};
use crate::tape::GradTape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    Kl,
    Bethe,
    Bmi,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Kl => "kl",
            LossKind::Bethe => "bethe",
            LossKind::Bmi => "bmi",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Extrinsic,
    NonExtrinsic,
}

impl Mode {
    pub fn rule(self) -> UpdateRule {
        match self {
            Mode::Extrinsic => UpdateRule::NeuralExtrinsic,
            Mode::NonExtrinsic => UpdateRule::Neural,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Ising,
    Channel,
}

impl Task {
    /// Number of side features appended to every network input.
    pub fn side_len(self) -> usize {
        match self {
            Task::Ising => 0,
            Task::Channel => 1 + MEMORY + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub mode: Mode,
    pub task: Task,
    pub alpha: f64,
    pub iterations: usize,
    /// Average the loss over the last `loss_last_k` iterations; 1 uses the
    /// final beliefs only.
    pub loss_last_k: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub restarts: usize,
    /// Spin-glass range of the training distribution.
    pub train_s: f64,
    /// Spin-glass range of the held-out set.
    pub validation_s: f64,
    /// Held-out graphs (Ising) or instances per Eb/N0 point (channel).
    pub validation_size: usize,
    pub validation_ebno: Vec<f64>,
    /// Training Eb/N0 range in dB, sampled uniformly per example.
    pub train_ebno: (f64, f64),
    /// Evaluate the held-out loss every this many steps (and at the end).
    pub validate_every: usize,
    /// Rescale the batch gradient to at most this Euclidean norm.
    pub grad_clip: Option<f64>,
    /// Keep the checkpoint with the lowest held-out loss instead of the
    /// final parameters.
    pub keep_best: bool,
    /// Make the learned rule odd under a global spin flip.
    pub odd_network: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Kl,
            mode: Mode::NonExtrinsic,
            task: Task::Ising,
            alpha: 25.0,
            iterations: 10,
            loss_last_k: 1,
            batch_size: 64,
            steps: 8000,
            learning_rate: 3e-3,
            seed: 0,
            restarts: 5,
            train_s: 3.0,
            validation_s: 2.0,
            validation_size: 2000,
            validation_ebno: (1..=7).map(|k| 2.0 * k as f64).collect(),
            train_ebno: (0.0, 16.0),
            validate_every: 250,
            grad_clip: Some(1.0),
            keep_best: true,
            odd_network: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if !(self.alpha >= 0.0) {
            return bad(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.loss_last_k == 0 || self.loss_last_k > self.iterations {
            return bad(format!("loss_last_k must lie in 1..={}", self.iterations));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("gradient clip norm must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.restarts == 0 {
            return bad("restarts must be at least 1".into());
        }
        if !(self.train_s > 0.0 && self.validation_s > 0.0) {
            return bad("spin-glass ranges must be positive".into());
        }
        if self.validation_size == 0 || self.validate_every == 0 {
            return bad("validation size and interval must be at least 1".into());
        }
        if self.task == Task::Channel && self.validation_ebno.is_empty() {
            return bad("channel validation needs at least one Eb/N0 point".into());
        }
        if self.loss == LossKind::Bmi && self.task != Task::Channel {
            return bad("the BMI loss needs labelled symbols (channel task)".into());
        }
        Ok(())
    }

    pub fn n_in(&self) -> usize {
        self.mode
            .rule()
            .n_in(self.task.side_len())
            .expect("learned rules have a network")
    }

    pub fn objective(&self) -> Objective {
        Objective {
            loss: self.loss,
            rule: self.mode.rule(),
            iterations: self.iterations,
            last_k: self.loss_last_k,
            alpha: self.alpha,
        }
    }
}

/// Everything needed to evaluate the training loss of one example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub loss: LossKind,
    pub rule: UpdateRule,
    pub iterations: usize,
    pub last_k: usize,
    pub alpha: f64,
}

/// A graph with whatever the loss needs: exact singles for KL, labels for
/// BMI, side features for the channel task.
#[derive(Debug, Clone)]
pub struct Example {
    pub graph: PairwiseFactorGraph<f64>,
    pub side: Vec<f64>,
    pub labels: Vec<f64>,
    pub exact: Vec<[f64; 2]>,
}

impl Example {
    pub fn new(graph: PairwiseFactorGraph<f64>, side: Vec<f64>, labels: Vec<f64>, with_exact: bool) -> Self {
        let exact = if with_exact {
            exact_marginals(&graph)
                .expect("training graphs are within the oracle cap")
                .singles
        } else {
            Vec::new()
        };
        Self {
            graph,
            side,
            labels,
            exact,
        }
    }
}

/// Mean over nodes of `KL(b_n ‖ p_n)`.
pub fn loss_kl<S: Scalar>(singles: &[[S; 2]], exact: &[[f64; 2]]) -> S {
    assert_eq!(singles.len(), exact.len(), "belief and marginal counts differ");
    let total = singles
        .iter()
        .zip(exact)
        .fold(S::zero(), |acc, (b, p)| {
            acc + kl_binary(*b, [S::from_f64(p[0]), S::from_f64(p[1])])
        });
    total / S::from_f64(singles.len() as f64)
}

/// `F_Bethe + α · 𝓛_𝕃`.
pub fn loss_bethe<S: Scalar>(g: &PairwiseFactorGraph<S>, b: &BeliefSet<S>, alpha: f64) -> S {
    bethe_free_energy(g, b) + S::from_f64(alpha) * consistency_distance(g, b)
}

/// `1 - BMI` estimate `(1/N) Σ log2(1 + e^{-c_n L_n})`.
pub fn loss_bmi<S: Scalar>(llrs: &[S], labels: &[f64]) -> S {
    assert_eq!(llrs.len(), labels.len(), "LLR and label counts differ");
    let total = llrs
        .iter()
        .zip(labels)
        .fold(S::zero(), |acc, (&l, &c)| acc + (-(l * S::from_f64(c))).softplus());
    total / S::from_f64(llrs.len() as f64 * std::f64::consts::LN_2)
}

/// Fully connected `n`-variable spin glass with fields and couplings drawn
/// i.i.d. from `U[-s, s]`.
pub fn sample_spin_glass<R: Rng + ?Sized>(s: f64, n: usize, rng: &mut R) -> PairwiseFactorGraph<f64> {
    assert!(s > 0.0, "spin-glass range must be positive");
    let unary = (0..n).map(|_| rng.random_range(-s..=s)).collect();
    let couplings: Vec<f64> = (0..n * (n - 1) / 2).map(|_| rng.random_range(-s..=s)).collect();
    PairwiseFactorGraph::fully_connected(unary, &couplings).expect("finite parameters")
}

/// Random tree on `n` variables: each variable after the first attaches to
/// a uniformly chosen earlier one. Parameters are i.i.d. `U[-s, s]`.
pub fn sample_random_tree<R: Rng + ?Sized>(s: f64, n: usize, rng: &mut R) -> PairwiseFactorGraph<f64> {
    assert!(s > 0.0, "parameter range must be positive");
    let unary = (0..n).map(|_| rng.random_range(-s..=s)).collect();
    let edges: Vec<(usize, usize, f64)> = (1..n)
        .map(|m| (rng.random_range(0..m), m, rng.random_range(-s..=s)))
        .collect();
    PairwiseFactorGraph::new(unary, &edges).expect("valid tree")
}

fn objective_on<S: Scalar>(
    params: &MlpParams<S>,
    ex: &Example,
    obj: &Objective,
) -> Result<S, ConfigError> {
    let g: PairwiseFactorGraph<S> = ex.graph.cast();
    let side: Vec<S> = ex.side.iter().map(|&v| S::from_f64(v)).collect();
    let mp = MessagePasser::new(&g, obj.rule, 0.0, Some(params), &side)?;
    let mut msgs = MessageState::zeros(g.num_edges());
    let mut acc = S::zero();
    for t in 0..obj.iterations {
        mp.step(&mut msgs);
        if t + obj.last_k < obj.iterations {
            continue;
        }
        acc += match obj.loss {
            LossKind::Kl => {
                let singles: Vec<[S; 2]> = mp
                    .belief_llrs(&msgs)
                    .into_iter()
                    .map(llr_to_distribution)
                    .collect();
                loss_kl(&singles, &ex.exact)
            }
            LossKind::Bethe => loss_bethe(&g, &mp.beliefs(&msgs), obj.alpha),
            LossKind::Bmi => loss_bmi(&mp.belief_llrs(&msgs), &ex.labels),
        };
    }
    Ok(acc / S::from_f64(obj.last_k as f64))
}

/// Loss of one example without recording gradients.
pub fn example_loss(params: &MlpParams<f64>, ex: &Example, obj: &Objective) -> Result<f64, ConfigError> {
    objective_on(params, ex, obj)
}

/// Loss of one example and its gradient with respect to the flattened
/// parameters, by reverse accumulation through the whole unroll.
pub fn example_loss_and_grad(
    params: &MlpParams<f64>,
    ex: &Example,
    obj: &Objective,
) -> Result<(f64, Vec<f64>), ConfigError> {
    let tape = GradTape::new();
    let p = params.on_tape(&tape);
    let loss = objective_on(&p, ex, obj)?;
    let adj = tape.backward(loss).expect("parameters are recorded on this tape");
    let grad = p.to_flat().into_iter().map(|v| adj.wrt(v)).collect();
    Ok((loss.value(), grad))
}

/// Mean loss and mean gradient over a batch.
pub fn batch_loss_and_grad(
    params: &MlpParams<f64>,
    batch: &[Example],
    obj: &Objective,
) -> Result<(f64, Vec<f64>), ConfigError> {
    let per: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|ex| example_loss_and_grad(params, ex, obj))
        .collect::<Result<_, _>>()?;
    let losses: Vec<f64> = per.iter().map(|(l, _)| *l).collect();
    let k = params.num_params();
    let mut column = vec![0.0; per.len()];
    let grad = (0..k)
        .map(|j| {
            for (c, (_, g)) in column.iter_mut().zip(&per) {
                *c = g[j];
            }
            pairwise_sum(&column) / per.len() as f64
        })
        .collect();
    Ok((pairwise_mean(&losses), grad))
}

/// Mean loss over a set, evaluated in parallel and reduced in order.
pub fn mean_loss(params: &MlpParams<f64>, set: &[Example], obj: &Objective) -> Result<f64, ConfigError> {
    let losses: Vec<f64> = set
        .par_iter()
        .map(|ex| example_loss(params, ex, obj))
        .collect::<Result<_, _>>()?;
    Ok(pairwise_mean(&losses))
}

/// Adam moments with `β1 = 0.9`, `β2 = 0.999`, `ε = 1e-8`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(num_params: usize) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut MlpParams<f64>, grads: &[f64], state: &mut OptimizerState, lr: f64) {
    let mut flat = params.to_flat();
    assert_eq!(flat.len(), grads.len(), "gradient shape mismatch");
    assert_eq!(flat.len(), state.m.len(), "optimizer shape mismatch");
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - OptimizerState::BETA1.powi(t);
    let c2 = 1.0 - OptimizerState::BETA2.powi(t);
    for (((p, &g), m), v) in flat.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = OptimizerState::BETA1 * *m + (1.0 - OptimizerState::BETA1) * g;
        *v = OptimizerState::BETA2 * *v + (1.0 - OptimizerState::BETA2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + OptimizerState::EPS);
    }
    *params = params.with_flat(&flat).expect("same shape");
}

/// Scales `grad` down to Euclidean norm `max_norm` if it is longer.
pub fn clip_norm(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= k);
    }
}

/// Example `index` of the training distribution.
pub fn sample_training_example(cfg: &TrainConfig, stream_seed: u64, domain: u64, index: u64) -> Example {
    let mut rng = substream(stream_seed, domain, index);
    let with_exact = cfg.loss == LossKind::Kl;
    match cfg.task {
        Task::Ising => Example::new(sample_spin_glass(cfg.train_s, 4, &mut rng), Vec::new(), Vec::new(), with_exact),
        Task::Channel => {
            let ebno = rng.random_range(cfg.train_ebno.0..cfg.train_ebno.1);
            let p = sample_detection_problem(BLOCK_LEN, MEMORY, ebno, &mut rng);
            Example::new(p.graph, p.side, p.symbols, with_exact)
        }
    }
}

/// Held-out set: `validation_size` S-range spin glasses, or that many
/// channel instances per validation Eb/N0 point.
pub fn validation_set(cfg: &TrainConfig) -> Vec<Example> {
    let with_exact = cfg.loss == LossKind::Kl;
    match cfg.task {
        Task::Ising => (0..cfg.validation_size as u64)
            .into_par_iter()
            .map(|i| {
                let mut rng = substream(cfg.seed, DOMAIN_VALIDATION, i);
                Example::new(sample_spin_glass(cfg.validation_s, 4, &mut rng), Vec::new(), Vec::new(), with_exact)
            })
            .collect(),
        Task::Channel => {
            let per = cfg.validation_size as u64;
            let points = cfg.validation_ebno.clone();
            (0..per * points.len() as u64)
                .into_par_iter()
                .map(|i| {
                    let ebno = points[(i / per) as usize];
                    let mut rng = substream(cfg.seed, DOMAIN_VALIDATION, i);
                    let p = sample_detection_problem(BLOCK_LEN, MEMORY, ebno, &mut rng);
                    Example::new(p.graph, p.side, p.symbols, with_exact)
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub restart: usize,
    pub step: usize,
    pub loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestartReport {
    pub restart: usize,
    pub init_seed: u64,
    pub steps_completed: usize,
    /// Step whose parameters were kept (the best checkpoint or the last).
    pub selected_step: usize,
    pub final_val_loss: Option<f64>,
    /// Step at which the loss or gradient became non-finite.
    pub diverged_at: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: MlpParams<f64>,
    pub best_restart: usize,
    pub final_val_loss: f64,
    pub curve: Vec<CurvePoint>,
    pub restarts: Vec<RestartReport>,
}

impl TrainOutput {
    /// `step,loss,val_loss` rows of the selected restart.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("step,loss,val_loss\n");
        for p in self.curve.iter().filter(|p| p.restart == self.best_restart) {
            let val = p.val_loss.map(|v| format!("{v:.10e}")).unwrap_or_default();
            out.push_str(&format!("{},{:.10e},{}\n", p.step, p.loss, val));
        }
        out
    }
}

fn train_one(
    cfg: &TrainConfig,
    restart: usize,
    validation: &[Example],
    curve: &mut Vec<CurvePoint>,
) -> Result<(MlpParams<f64>, RestartReport), TrainError> {
    let obj = cfg.objective();
    let init_seed = substream(cfg.seed, DOMAIN_INIT, restart as u64).random::<u64>();
    let mut params = init_params(cfg.n_in(), init_seed).with_odd_symmetry(cfg.odd_network);
    let mut state = OptimizerState::new(params.num_params());
    let domain = DOMAIN_TRAIN + restart as u64;
    let mut report = RestartReport {
        restart,
        init_seed,
        steps_completed: 0,
        selected_step: 0,
        final_val_loss: None,
        diverged_at: None,
    };
    let mut best: Option<(f64, usize, MlpParams<f64>)> = None;
    for step in 0..cfg.steps {
        let base = (step * cfg.batch_size) as u64;
        let batch: Vec<Example> = (0..cfg.batch_size as u64)
            .into_par_iter()
            .map(|i| sample_training_example(cfg, cfg.seed, domain, base + i))
            .collect();
        let (loss, mut grad) = batch_loss_and_grad(&params, &batch, &obj)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            report.diverged_at = Some(step);
            break;
        }
        if let Some(max_norm) = cfg.grad_clip {
            clip_norm(&mut grad, max_norm);
        }
        adam_step(&mut params, &grad, &mut state, cfg.learning_rate);
        if !params.is_finite() {
            report.diverged_at = Some(step);
            break;
        }
        report.steps_completed = step + 1;
        let last = step + 1 == cfg.steps;
        let val_loss = if last || (step + 1) % cfg.validate_every == 0 {
            let v = mean_loss(&params, validation, &obj)?;
            if !v.is_finite() {
                report.diverged_at = Some(step);
                break;
            }
            let better = best.as_ref().is_none_or(|(b, _, _)| v < *b);
            if last && !cfg.keep_best || cfg.keep_best && better {
                best = Some((v, step + 1, params.clone()));
            }
            Some(v)
        } else {
            None
        };
        curve.push(CurvePoint {
            restart,
            step: step + 1,
            loss,
            val_loss,
        });
    }
    if cfg.steps == 0 {
        let v = mean_loss(&params, validation, &obj)?;
        best = v.is_finite().then(|| (v, 0, params.clone()));
    }
    match best {
        Some((v, step, p)) if report.diverged_at.is_none() || cfg.keep_best => {
            report.final_val_loss = Some(v);
            report.selected_step = step;
            Ok((p, report))
        }
        _ => Ok((params, report)),
    }
}

/// Trains `cfg.restarts` independently initialized networks and keeps the
/// one with the lowest held-out loss. Within a restart the held-out loss is
/// checked every `validate_every` steps; with `keep_best` the best checkpoint
/// is kept, otherwise the final parameters. A restart whose loss or
/// parameters become non-finite stops there and keeps only checkpoints taken
/// before that point.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    let validation = validation_set(cfg);
    let mut curve = Vec::new();
    let mut reports = Vec::with_capacity(cfg.restarts);
    let mut best: Option<(f64, usize, MlpParams<f64>)> = None;
    for restart in 0..cfg.restarts {
        let (params, report) = train_one(cfg, restart, &validation, &mut curve)?;
        if let Some(v) = report.final_val_loss {
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, restart, params));
            }
        }
        reports.push(report);
    }
    let (final_val_loss, best_restart, params) = best.ok_or(TrainError::Diverged {
        restarts: cfg.restarts,
    })?;
    Ok(TrainOutput {
        params,
        best_restart,
        final_val_loss,
        curve,
        restarts: reports,
    })
}
