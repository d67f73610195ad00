//! BPSK over a real-tap ISI channel with complex AWGN, and the detection
//! graph built from the matched-filter statistics `x = Hᴴy`, `G = HᴴH`.
//!
//! With `c ∈ {±1}^N` the likelihood `exp(-‖y - Hc‖² / σ²)` factorizes as
//! `Π_n exp(2 Re(x_n) c_n / σ²) · Π_{n<m} exp(-2 G_nm c_n c_m / σ²)` up to a
//! constant, which is a binary pairwise graph with `E_n = 2 Re(x_n) / σ²` and
//! `E_nm = -2 G_nm / σ²`.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::ConfigError;
use crate::graph::PairwiseFactorGraph;

/// Block length used by the detection experiments.
pub const BLOCK_LEN: usize = 4;
/// Channel memory used by the detection experiments.
pub const MEMORY: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelInstance {
    pub taps: Vec<f64>,
    pub sigma2: f64,
    pub block_len: usize,
}

impl ChannelInstance {
    pub fn new(taps: Vec<f64>, sigma2: f64, block_len: usize) -> Result<Self, ConfigError> {
        let energy: f64 = taps.iter().map(|h| h * h).sum();
        if taps.is_empty() || (energy - 1.0).abs() > 1e-12 {
            return Err(ConfigError::Invalid(format!(
                "channel taps must have unit energy, got {energy}"
            )));
        }
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(ConfigError::Invalid(format!("noise variance must be positive, got {sigma2}")));
        }
        if block_len == 0 {
            return Err(ConfigError::Invalid("block length must be at least 1".into()));
        }
        Ok(Self {
            taps,
            sigma2,
            block_len,
        })
    }

    pub fn memory(&self) -> usize {
        self.taps.len() - 1
    }

    pub fn matrix(&self) -> ChannelMatrix {
        build_channel_matrix(&self.taps, self.block_len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionSample {
    pub symbols: Vec<f64>,
    pub observation: Vec<Complex64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedStats {
    pub x: Vec<Complex64>,
    /// Row-major `N × N` Gram matrix.
    pub gram: Vec<f64>,
    pub block_len: usize,
}

impl MatchedStats {
    pub fn g(&self, n: usize, m: usize) -> f64 {
        self.gram[n * self.block_len + m]
    }
}

/// Banded `(N + L) × N` convolution matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ChannelMatrix {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// `H c` for a real input.
    pub fn apply(&self, c: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| (0..self.cols).map(|k| self.get(r, k) * c[k]).sum())
            .collect()
    }
}

/// Draws `L + 1` i.i.d. standard normal taps and normalizes them to unit
/// energy.
pub fn sample_random_channel<R: Rng + ?Sized>(memory: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let taps: Vec<f64> = (0..=memory).map(|_| rng.sample(StandardNormal)).collect();
        let norm = taps.iter().map(|h| h * h).sum::<f64>().sqrt();
        if norm > 0.0 {
            return taps.into_iter().map(|h| h / norm).collect();
        }
    }
}

pub fn build_channel_matrix(taps: &[f64], block_len: usize) -> ChannelMatrix {
    let rows = block_len + taps.len() - 1;
    let mut data = vec![0.0; rows * block_len];
    for j in 0..block_len {
        for (k, &h) in taps.iter().enumerate() {
            data[(j + k) * block_len + j] = h;
        }
    }
    ChannelMatrix {
        rows,
        cols: block_len,
        data,
    }
}

/// `y = Hc + w` with `w ~ CN(0, σ²)`: real and imaginary parts each have
/// variance `σ² / 2`.
pub fn simulate_transmission<R: Rng + ?Sized>(
    ch: &ChannelInstance,
    symbols: &[f64],
    rng: &mut R,
) -> TransmissionSample {
    assert_eq!(symbols.len(), ch.block_len, "symbol block length mismatch");
    let std = (ch.sigma2 / 2.0).sqrt();
    let clean = ch.matrix().apply(symbols);
    let observation = clean
        .into_iter()
        .map(|s| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(s + std * re, std * im)
        })
        .collect();
    TransmissionSample {
        symbols: symbols.to_vec(),
        observation,
    }
}

pub fn matched_filter(h: &ChannelMatrix, y: &[Complex64]) -> MatchedStats {
    assert_eq!(y.len(), h.rows, "observation length mismatch");
    let n = h.cols;
    let x = (0..n)
        .map(|c| (0..h.rows).map(|r| y[r] * h.get(r, c)).sum())
        .collect();
    let mut gram = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            gram[a * n + b] = (0..h.rows).map(|r| h.get(r, a) * h.get(r, b)).sum();
        }
    }
    MatchedStats {
        x,
        gram,
        block_len: n,
    }
}

/// Pairwise graph of the posterior `p(c | y)`. Pairs with an exactly zero
/// Gram entry get no edge.
pub fn build_detection_graph(stats: &MatchedStats, sigma2: f64) -> PairwiseFactorGraph<f64> {
    let n = stats.block_len;
    let unary = stats.x.iter().map(|x| 2.0 * x.re / sigma2).collect();
    let edges: Vec<(usize, usize, f64)> = (0..n)
        .flat_map(|a| ((a + 1)..n).map(move |b| (a, b)))
        .filter(|&(a, b)| stats.g(a, b) != 0.0)
        .map(|(a, b)| (a, b, -2.0 * stats.g(a, b) / sigma2))
        .collect();
    PairwiseFactorGraph::new(unary, &edges).expect("band edges are distinct and finite")
}

/// `σ² = 10^(-Eb/N0 / 10)` for unit-energy BPSK.
pub fn ebno_db_to_sigma2(ebno_db: f64) -> f64 {
    10f64.powf(-ebno_db / 10.0)
}

/// `+1` for `L ≥ 0`, else `-1`.
pub fn hard_decision(llr: f64) -> f64 {
    if llr >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Side features appended to the network input for detection:
/// `[Eb/N0 in dB, h_0, ..., h_L]`.
pub fn side_features(ebno_db: f64, taps: &[f64]) -> Vec<f64> {
    std::iter::once(ebno_db).chain(taps.iter().copied()).collect()
}

/// One detection problem: the graph, the transmitted symbols and the side
/// features of its channel.
#[derive(Debug, Clone)]
pub struct DetectionProblem {
    pub graph: PairwiseFactorGraph<f64>,
    pub symbols: Vec<f64>,
    pub side: Vec<f64>,
}

/// Random channel, uniform symbols, noisy observation and detection graph.
pub fn sample_detection_problem<R: Rng + ?Sized>(
    block_len: usize,
    memory: usize,
    ebno_db: f64,
    rng: &mut R,
) -> DetectionProblem {
    let taps = sample_random_channel(memory, rng);
    let sigma2 = ebno_db_to_sigma2(ebno_db);
    let ch = ChannelInstance::new(taps, sigma2, block_len).expect("valid by construction");
    let symbols: Vec<f64> = (0..block_len)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let tx = simulate_transmission(&ch, &symbols, rng);
    let stats = matched_filter(&ch.matrix(), &tx.observation);
    DetectionProblem {
        graph: build_detection_graph(&stats, sigma2),
        symbols,
        side: side_features(ebno_db, &ch.taps),
    }
}
