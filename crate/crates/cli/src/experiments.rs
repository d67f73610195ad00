//! The experiments behind each subcommand. Every random object comes from a
//! per-item sub-stream, items are evaluated in parallel and averages use
//! pairwise summation in item order, so results are identical for any number
//! of worker threads.

use std::fmt::Write;

use rayon::prelude::*;

use cycbp::bethe::{bethe_free_energy, consistency_distance};
use cycbp::channel::{sample_detection_problem, BLOCK_LEN, MEMORY};
use cycbp::neural::neural_fn_update_extrinsic;
use cycbp::oracle::{exact_marginals, mean_kl};
use cycbp::rng::{substream, DOMAIN_CHANNEL_EVAL, DOMAIN_EVAL};
use cycbp::scalar::pairwise_mean;
use cycbp::spa::spa_fn_update;
use cycbp::training::{loss_bmi, sample_spin_glass};
use cycbp::{MlpParams, PairwiseFactorGraph};

use crate::algos::Estimator;
use crate::CliError;

/// Number of spins in the Ising experiments.
pub const ISING_VARS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub algo: String,
    pub mean_kl: f64,
    pub std_kl: f64,
    pub mean_fbethe: f64,
    pub mean_ll: f64,
}

/// Graph `index` of the evaluation set for `seed` and range `s`.
pub fn evaluation_graph(seed: u64, s: f64, index: u64) -> PairwiseFactorGraph<f64> {
    sample_spin_glass(s, ISING_VARS, &mut substream(seed, DOMAIN_EVAL, index))
}

fn sample_std(values: &[f64], mean: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
    let n = values.len() as f64;
    (pairwise_mean(&sq) * n / (n - 1.0)).sqrt()
}

/// Mean and spread of the marginal error, mean Bethe free energy and mean
/// consistency distance of every estimator on the same `num_graphs` spin
/// glasses.
pub fn ising_table(estimators: &[Estimator], seed: u64, num_graphs: usize, s: f64) -> Result<Vec<TableRow>, CliError> {
    if num_graphs == 0 {
        return Err(CliError::Config("num-graphs must be positive".into()));
    }
    if !(s > 0.0 && s.is_finite()) {
        return Err(CliError::Config(format!("invalid parameter range {s}")));
    }
    // Per graph, per estimator: (kl, F, L).
    let per_graph: Vec<Vec<[f64; 3]>> = (0..num_graphs as u64)
        .into_par_iter()
        .map(|i| {
            let g = evaluation_graph(seed, s, i);
            let exact = exact_marginals(&g)?;
            estimators
                .iter()
                .map(|est| {
                    let b = est.run(&g, &[])?.beliefs;
                    Ok([
                        mean_kl(&b.singles, &exact.singles),
                        bethe_free_energy(&g, &b),
                        consistency_distance(&g, &b),
                    ])
                })
                .collect()
        })
        .collect::<Result<_, CliError>>()?;
    Ok(estimators
        .iter()
        .enumerate()
        .map(|(a, est)| {
            let col = |k: usize| -> Vec<f64> { per_graph.iter().map(|r| r[a][k]).collect() };
            let kl = col(0);
            let mean_kl = pairwise_mean(&kl);
            TableRow {
                algo: est.algo().name().to_string(),
                mean_kl,
                std_kl: sample_std(&kl, mean_kl),
                mean_fbethe: pairwise_mean(&col(1)),
                mean_ll: pairwise_mean(&col(2)),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatCell {
    pub theta: f64,
    pub j: f64,
    pub kl: f64,
}

/// `count` evenly spaced points covering `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count)
            .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
            .collect(),
    }
}

/// Marginal error on the constant-parameter fully connected model for every
/// `(θ, J)` of a `grid × grid` lattice over `[-2, 2]²`, θ varying slowest.
pub fn ising_heatmap(est: &Estimator, grid: usize) -> Result<Vec<HeatCell>, CliError> {
    if grid < 2 {
        return Err(CliError::Config("grid needs at least 2 points per axis".into()));
    }
    let axis = linspace(-2.0, 2.0, grid);
    let edges = ISING_VARS * (ISING_VARS - 1) / 2;
    (0..grid * grid)
        .into_par_iter()
        .map(|k| {
            let (theta, j) = (axis[k / grid], axis[k % grid]);
            let g = PairwiseFactorGraph::fully_connected(vec![theta; ISING_VARS], &vec![j; edges])?;
            let exact = exact_marginals(&g)?;
            let b = est.run(&g, &[])?.beliefs;
            Ok(HeatCell {
                theta,
                j,
                kl: mean_kl(&b.singles, &exact.singles),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MappingRow {
    pub e: f64,
    pub llr_in: f64,
    pub llr_out_spa: f64,
    pub llr_out_model: f64,
}

/// Exact factor update next to the learned extrinsic one over a grid of
/// couplings and incoming LLRs.
pub fn dump_mapping(params: &MlpParams<f64>, e_values: &[f64], llr_in: &[f64]) -> Result<Vec<MappingRow>, CliError> {
    let mut rows = Vec::with_capacity(e_values.len() * llr_in.len());
    for &e in e_values {
        for &l in llr_in {
            rows.push(MappingRow {
                e,
                llr_in: l,
                llr_out_spa: spa_fn_update(e, l),
                llr_out_model: neural_fn_update_extrinsic(params, l, e, &[])?,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub ebno_db: f64,
    pub algo: String,
    pub one_minus_bmi: f64,
}

/// `1 - BMI` of every estimator over `num_instances` random channels per
/// SNR point. Instance `k` reuses the same stream at every SNR, so the taps,
/// symbols and unscaled noise are shared across the sweep.
pub fn channel_sweep(
    estimators: &[Estimator],
    seed: u64,
    num_instances: usize,
    ebno: &[f64],
) -> Result<Vec<SweepRow>, CliError> {
    if num_instances == 0 {
        return Err(CliError::Config("num-graphs must be positive".into()));
    }
    if ebno.is_empty() || ebno.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Config("need at least one finite Eb/N0 value".into()));
    }
    let mut rows = Vec::with_capacity(ebno.len() * estimators.len());
    for &snr in ebno {
        let per: Vec<Vec<f64>> = (0..num_instances as u64)
            .into_par_iter()
            .map(|k| {
                let mut rng = substream(seed, DOMAIN_CHANNEL_EVAL, k);
                let p = sample_detection_problem(BLOCK_LEN, MEMORY, snr, &mut rng);
                estimators
                    .iter()
                    .map(|est| Ok(loss_bmi(&est.run(&p.graph, &p.side)?.llrs, &p.symbols)))
                    .collect()
            })
            .collect::<Result<_, CliError>>()?;
        for (a, est) in estimators.iter().enumerate() {
            let col: Vec<f64> = per.iter().map(|r| r[a]).collect();
            rows.push(SweepRow {
                ebno_db: snr,
                algo: est.algo().name().to_string(),
                one_minus_bmi: pairwise_mean(&col),
            });
        }
    }
    Ok(rows)
}

/// `start:step:stop` (inclusive) or a comma-separated list.
pub fn parse_ebno(s: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::Config(format!("cannot parse Eb/N0 list `{s}`"));
    let num = |t: &str| t.trim().parse::<f64>().map_err(|_| bad());
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [start, step, stop] => {
            let (start, step, stop) = (num(start)?, num(step)?, num(stop)?);
            if !(step > 0.0) || stop < start {
                return Err(bad());
            }
            let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
            Ok((0..count).map(|i| start + step * i as f64).collect())
        }
        [list] => list.split(',').map(num).collect(),
        _ => Err(bad()),
    }
}

/// Round-trip formatting that avoids long zero runs for tiny magnitudes.
fn num(x: f64) -> String {
    if x == 0.0 || (1e-4..1e6).contains(&x.abs()) || !x.is_finite() {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

fn csv(header_comment: &str, columns: &str, body: impl FnOnce(&mut String)) -> String {
    let mut out = String::new();
    writeln!(out, "# {header_comment}").unwrap();
    writeln!(out, "{columns}").unwrap();
    body(&mut out);
    out
}

pub fn table_csv(comment: &str, rows: &[TableRow]) -> String {
    csv(comment, "algo,mean_kl,std_kl,mean_fbethe,mean_ll", |out| {
        for r in rows {
            writeln!(out, "{},{},{},{},{}", r.algo, num(r.mean_kl), num(r.std_kl), num(r.mean_fbethe), num(r.mean_ll)).unwrap();
        }
    })
}

pub fn heatmap_csv(comment: &str, cells: &[HeatCell]) -> String {
    csv(comment, "theta,j,kl", |out| {
        for c in cells {
            writeln!(out, "{},{},{}", num(c.theta), num(c.j), num(c.kl)).unwrap();
        }
    })
}

pub fn mapping_csv(comment: &str, rows: &[MappingRow]) -> String {
    csv(comment, "e,llr_in,llr_out_spa,llr_out_model", |out| {
        for r in rows {
            writeln!(out, "{},{},{},{}", num(r.e), num(r.llr_in), num(r.llr_out_spa), num(r.llr_out_model)).unwrap();
        }
    })
}

pub fn sweep_csv(comment: &str, rows: &[SweepRow]) -> String {
    csv(comment, "ebno_db,algo,one_minus_bmi", |out| {
        for r in rows {
            writeln!(out, "{},{},{}", num(r.ebno_db), r.algo, num(r.one_minus_bmi)).unwrap();
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algos::Algo;

    fn est(algo: Algo) -> Estimator {
        Estimator::new(algo, None, 0.1, 10, 0).unwrap()
    }

    #[test]
    fn ebno_lists() {
        assert_eq!(parse_ebno("2:2:14").unwrap(), vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0]);
        assert_eq!(parse_ebno("0:0.5:1").unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(parse_ebno("3,7").unwrap(), vec![3.0, 7.0]);
        assert!(parse_ebno("1:0:3").is_err());
        assert!(parse_ebno("1:2").is_err());
        assert!(parse_ebno("x").is_err());
    }

    #[test]
    fn exact_row_has_zero_error() {
        let rows = ising_table(&[est(Algo::Exact), est(Algo::Spa)], 3, 5, 2.0).unwrap();
        assert_eq!(rows[0].mean_kl, 0.0);
        assert_eq!(rows[0].std_kl, 0.0);
        assert!(rows[0].mean_ll.abs() < 1e-12);
        assert!(rows[1].mean_kl > 0.0);
    }

    #[test]
    fn heatmap_origin_is_exact() {
        let cells = ising_heatmap(&est(Algo::Spa), 5).unwrap();
        assert_eq!(cells.len(), 25);
        let origin = cells.iter().find(|c| c.theta == 0.0 && c.j == 0.0).unwrap();
        assert_eq!(origin.kl, 0.0);
        assert_eq!((cells[1].theta, cells[1].j), (-2.0, -1.0));
    }

    #[test]
    fn mapping_spa_column() {
        let rows = dump_mapping(&MlpParams::zeros(2), &linspace(-2.0, 2.0, 7), &linspace(-25.0, 25.0, 11)).unwrap();
        assert_eq!(rows.len(), 77);
        for r in &rows {
            if r.llr_in == 0.0 {
                assert_eq!(r.llr_out_spa, 0.0);
            }
            if r.llr_in == 25.0 {
                assert!((r.llr_out_spa - 2.0 * r.e).abs() < 1e-9);
            }
            assert!(r.llr_out_model.is_finite());
        }
    }

    #[test]
    fn exact_detector_beats_spa_on_channels() {
        let rows = channel_sweep(&[est(Algo::Exact), est(Algo::Spa)], 1, 300, &[6.0]).unwrap();
        assert!(rows[0].one_minus_bmi <= rows[1].one_minus_bmi);
        assert!(rows[0].one_minus_bmi > 0.0);
    }
}
