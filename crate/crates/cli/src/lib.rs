//! Command-line experiment runner: marginal-error tables, parameter-plane
//! heatmaps, learned-mapping dumps, training and channel detection sweeps.
//! Every command writes CSV whose first line is a `#` comment echoing the
//! configuration and the tool version.

pub mod algos;
pub mod experiments;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use cycbp::channel::side_features;
use cycbp::error::{ConfigError, GraphError, ModelFileError, OracleError, TrainError};
use cycbp::neural::{load_params, save_params};
use cycbp::training::{train, LossKind, Mode, Task, TrainConfig};
use cycbp::MlpParams;

use algos::{parse_algos, Algo, Estimator};
use experiments::*;

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{context}: {source}")]
    Model {
        context: String,
        #[source]
        source: ModelFileError,
    },
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Diverged(String),
    #[error(transparent)]
    Engine(#[from] ConfigError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

impl CliError {
    /// Process exit code: 3 for training divergence, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Diverged(_) => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cycbp", version, about = "Message-passing inference experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Marginal error, Bethe free energy and consistency distance per algorithm.
    IsingTable(TableArgs),
    /// Marginal error of one algorithm over the constant-parameter (θ, J) plane.
    IsingHeatmap(HeatmapArgs),
    /// Learned extrinsic factor update next to the exact one.
    DumpMapping(MappingArgs),
    /// Train an update network; writes the model and a loss curve.
    Train(TrainArgs),
    /// 1 - BMI of symbol detection on random ISI channels.
    ChannelSweep(SweepArgs),
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated algorithms from spa, spa_mu, cccp, cycbp_e, cycbp, exact.
    #[arg(long)]
    pub algos: Option<String>,
    /// Network file for a learned algorithm, as `algo=path`; repeatable.
    #[arg(long = "model", value_name = "ALGO=PATH")]
    pub models: Vec<String>,
    /// Momentum of spa_mu.
    #[arg(long, default_value_t = 0.1)]
    pub mu: f64,
    /// Message-passing iterations.
    #[arg(long, default_value_t = 10)]
    pub iterations: usize,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TableArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    #[arg(long, default_value_t = 10_000)]
    pub num_graphs: usize,
    /// Parameters are drawn from U[-s, s].
    #[arg(long, default_value_t = 2.0)]
    pub s: f64,
}

#[derive(Debug, Clone, Args)]
pub struct HeatmapArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Points per axis.
    #[arg(long, default_value_t = 41)]
    pub grid: usize,
}

#[derive(Debug, Clone, Args)]
pub struct MappingArgs {
    /// cycbp_e network, as `cycbp_e=path`.
    #[arg(long = "model", value_name = "ALGO=PATH", required = true)]
    pub models: Vec<String>,
    /// Incoming-LLR points over [-25, 25].
    #[arg(long, default_value_t = 101)]
    pub grid: usize,
    /// Coupling values over [-2, 2].
    #[arg(long, default_value_t = 7)]
    pub num_e: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Kl,
    Bethe,
    Bmi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Extrinsic,
    NonExtrinsic,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = LossArg::Kl)]
    pub loss: LossArg,
    #[arg(long, value_enum, default_value_t = ModeArg::NonExtrinsic)]
    pub mode: ModeArg,
    /// Weight of the consistency term in the Bethe loss.
    #[arg(long, default_value_t = 25.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 10)]
    pub iterations: usize,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub restarts: Option<usize>,
    /// Training spin-glass range.
    #[arg(long)]
    pub s: Option<f64>,
    /// Gradient norm limit; 0 disables clipping.
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Train a plain network instead of the flip-odd one.
    #[arg(long)]
    pub no_odd: bool,
    /// Model output file.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss-curve CSV; defaults to `<out>.curve.csv`.
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Channel instances per SNR point.
    #[arg(long, default_value_t = 100_000)]
    pub num_graphs: usize,
    /// Eb/N0 grid in dB, `start:step:stop` or a comma list.
    #[arg(long, default_value = "2:2:14")]
    pub ebno: String,
}

/// What a command produced: CSV text and where it goes.
#[derive(Debug, Clone)]
pub struct Output {
    pub csv: String,
    pub path: Option<PathBuf>,
}

fn parse_model_specs(specs: &[String]) -> Result<Vec<(Algo, PathBuf)>, CliError> {
    let mut out: Vec<(Algo, PathBuf)> = Vec::new();
    for spec in specs {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--model expects algo=path, got `{spec}`")))?;
        let algo: Algo = name.trim().parse()?;
        if !algo.is_learned() {
            return Err(CliError::Config(format!("{algo} takes no model")));
        }
        if out.iter().any(|(a, _)| *a == algo) {
            return Err(CliError::Config(format!("two models given for {algo}")));
        }
        out.push((algo, PathBuf::from(path)));
    }
    Ok(out)
}

fn load_model(algo: Algo, path: &Path) -> Result<MlpParams<f64>, CliError> {
    load_params(path).map_err(|source| CliError::Model {
        context: format!("{algo}: cannot load {}", path.display()),
        source,
    })
}

/// Resolves `--algos` and `--model` into estimators. Without `--algos` the
/// defaults are followed by every algorithm a model was given for.
fn build_estimators(eval: &EvalArgs, defaults: &[Algo], side_len: usize) -> Result<Vec<Estimator>, CliError> {
    let models = parse_model_specs(&eval.models)?;
    let algos = match &eval.algos {
        Some(list) => parse_algos(list)?,
        None => defaults
            .iter()
            .copied()
            .chain(models.iter().map(|(a, _)| *a).filter(|a| !defaults.contains(a)))
            .collect(),
    };
    algos
        .into_iter()
        .map(|algo| {
            let params = match models.iter().find(|(a, _)| *a == algo) {
                Some((_, path)) => Some(load_model(algo, path)?),
                None => None,
            };
            Estimator::new(algo, params, eval.mu, eval.iterations, side_len)
        })
        .collect()
}

fn describe_eval(out: &mut String, eval: &EvalArgs, estimators: &[Estimator]) {
    let names: Vec<&str> = estimators.iter().map(|e| e.algo().name()).collect();
    write!(out, " seed={} algos={} mu={} iterations={}", eval.seed, names.join(","), eval.mu, eval.iterations).unwrap();
    for spec in &eval.models {
        write!(out, " model={spec}").unwrap();
    }
}

fn comment(command: &str, body: impl FnOnce(&mut String)) -> String {
    let mut s = format!("cycbp {VERSION} command={command}");
    body(&mut s);
    s
}

pub fn run_table(a: &TableArgs) -> Result<Output, CliError> {
    let est = build_estimators(&a.eval, &[Algo::Spa, Algo::SpaMu, Algo::Cccp], 0)?;
    let rows = ising_table(&est, a.eval.seed, a.num_graphs, a.s)?;
    let c = comment("ising-table", |s| {
        describe_eval(s, &a.eval, &est);
        write!(s, " num_graphs={} s={} n=4", a.num_graphs, a.s).unwrap();
    });
    Ok(Output {
        csv: table_csv(&c, &rows),
        path: a.eval.out.clone(),
    })
}

pub fn run_heatmap(a: &HeatmapArgs) -> Result<Output, CliError> {
    let est = build_estimators(&a.eval, &[Algo::Spa], 0)?;
    let [single] = est.as_slice() else {
        return Err(CliError::Config("ising-heatmap runs exactly one algorithm".into()));
    };
    let cells = ising_heatmap(single, a.grid)?;
    let c = comment("ising-heatmap", |s| {
        describe_eval(s, &a.eval, &est);
        write!(s, " grid={} range=-2:2", a.grid).unwrap();
    });
    Ok(Output {
        csv: heatmap_csv(&c, &cells),
        path: a.eval.out.clone(),
    })
}

pub fn run_mapping(a: &MappingArgs) -> Result<Output, CliError> {
    let models = parse_model_specs(&a.models)?;
    let [(Algo::CycbpE, path)] = models.as_slice() else {
        return Err(CliError::Config("dump-mapping needs exactly one cycbp_e model".into()));
    };
    let params = load_model(Algo::CycbpE, path)?;
    Estimator::new(Algo::CycbpE, Some(params.clone()), 0.0, 1, 0)?;
    if a.grid < 2 || a.num_e < 1 {
        return Err(CliError::Config("mapping grid too small".into()));
    }
    let rows = dump_mapping(&params, &linspace(-2.0, 2.0, a.num_e), &linspace(-25.0, 25.0, a.grid))?;
    let c = comment("dump-mapping", |s| {
        write!(s, " model=cycbp_e={} grid={} num_e={}", path.display(), a.grid, a.num_e).unwrap();
    });
    Ok(Output {
        csv: mapping_csv(&c, &rows),
        path: a.out.clone(),
    })
}

pub fn run_sweep(a: &SweepArgs) -> Result<Output, CliError> {
    let side_len = side_features(0.0, &[0.0; cycbp::channel::MEMORY + 1]).len();
    let est = build_estimators(&a.eval, &[Algo::Exact, Algo::Spa], side_len)?;
    let ebno = parse_ebno(&a.ebno)?;
    let rows = channel_sweep(&est, a.eval.seed, a.num_graphs, &ebno)?;
    let c = comment("channel-sweep", |s| {
        describe_eval(s, &a.eval, &est);
        write!(s, " num_graphs={} ebno={}", a.num_graphs, a.ebno).unwrap();
    });
    Ok(Output {
        csv: sweep_csv(&c, &rows),
        path: a.eval.out.clone(),
    })
}

/// Maps training flags onto a [`TrainConfig`].
pub fn train_config(a: &TrainArgs) -> Result<TrainConfig, CliError> {
    let d = TrainConfig::default();
    let loss = match a.loss {
        LossArg::Kl => LossKind::Kl,
        LossArg::Bethe => LossKind::Bethe,
        LossArg::Bmi => LossKind::Bmi,
    };
    let cfg = TrainConfig {
        loss,
        mode: match a.mode {
            ModeArg::Extrinsic => Mode::Extrinsic,
            ModeArg::NonExtrinsic => Mode::NonExtrinsic,
        },
        task: if loss == LossKind::Bmi { Task::Channel } else { Task::Ising },
        alpha: a.alpha,
        iterations: a.iterations,
        seed: a.seed,
        steps: a.steps.unwrap_or(d.steps),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        learning_rate: a.lr.unwrap_or(d.learning_rate),
        restarts: a.restarts.unwrap_or(d.restarts),
        train_s: a.s.unwrap_or(d.train_s),
        odd_network: d.odd_network && !a.no_odd,
        grad_clip: match a.grad_clip {
            Some(c) if c == 0.0 => None,
            Some(c) => Some(c),
            None => d.grad_clip,
        },
        ..d
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Trains, writes the model to `--out` and returns the curve CSV together
/// with a human-readable restart report.
pub fn run_train(a: &TrainArgs) -> Result<(Output, String), CliError> {
    let cfg = train_config(a)?;
    let result = train(&cfg).map_err(|e| match e {
        TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
        TrainError::Config(c) => CliError::Engine(c),
        TrainError::Oracle(o) => CliError::Oracle(o),
    })?;
    let mut report = String::new();
    for r in &result.restarts {
        writeln!(
            report,
            "restart {}: init_seed={} steps={} selected_step={} val_loss={} diverged_at={}",
            r.restart,
            r.init_seed,
            r.steps_completed,
            r.selected_step,
            r.final_val_loss.map_or("none".into(), |v| v.to_string()),
            r.diverged_at.map_or("none".into(), |s| s.to_string()),
        )
        .unwrap();
    }
    writeln!(report, "kept restart {} with validation loss {}", result.best_restart, result.final_val_loss).unwrap();
    save_params(&result.params, &a.out).map_err(|source| CliError::Model {
        context: format!("cannot save {}", a.out.display()),
        source,
    })?;
    let c = comment("train", |s| {
        write!(
            s,
            " seed={} loss={} mode={:?} alpha={} iterations={} steps={} batch_size={} lr={} restarts={} s={} grad_clip={:?} validate_every={} odd={}",
            cfg.seed,
            cfg.loss.name(),
            cfg.mode,
            cfg.alpha,
            cfg.iterations,
            cfg.steps,
            cfg.batch_size,
            cfg.learning_rate,
            cfg.restarts,
            cfg.train_s,
            cfg.grad_clip,
            cfg.validate_every,
            cfg.odd_network,
        )
        .unwrap();
    });
    let curve = a.curve.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".curve.csv");
        PathBuf::from(p)
    });
    Ok((
        Output {
            csv: format!("# {c}\n{}", result.curve_csv()),
            path: Some(curve),
        },
        report,
    ))
}

/// Writes `out` to its file, or stdout when it has none.
pub fn emit(out: &Output) -> Result<(), CliError> {
    match &out.path {
        Some(path) => std::fs::write(path, &out.csv).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        }),
        None => {
            print!("{}", out.csv);
            Ok(())
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let out = match &cli.command {
        Command::IsingTable(a) => run_table(a)?,
        Command::IsingHeatmap(a) => run_heatmap(a)?,
        Command::DumpMapping(a) => run_mapping(a)?,
        Command::ChannelSweep(a) => run_sweep(a)?,
        Command::Train(a) => {
            let (out, report) = run_train(a)?;
            eprint!("{report}");
            out
        }
    };
    emit(&out)
}
