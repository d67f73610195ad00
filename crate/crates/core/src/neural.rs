//! The compact update network and the learned factor-node rules.
//!
//! The network is `y = w3 · tanh(W2 · relu(W1 · x + b1) + b2) + b3` with
//! seven hidden units per layer. One parameter set is shared by every factor
//! node and every iteration of a run.
//!
//! Optionally the learned rules are made odd under a global spin flip: the
//! output is `(y(x) - y(Px)) / 2`, where `P` negates the LLR and unary
//! features and keeps couplings and side features. The exact factor update
//! has this symmetry.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ConfigError, ModelFileError};
use crate::scalar::Scalar;
use crate::spa::LLR_CLAMP;
use crate::tape::{GradTape, Var};

pub const HIDDEN: usize = 7;

/// Feature count of the extrinsic rule: `[L_ext, E_nm]`.
pub const EXTRINSIC_INPUTS: usize = 2;
/// Feature count of the non-extrinsic rule: `[L_ext, L_intr, Ẽ_src, E_nm, Ẽ_dst]`.
pub const NON_EXTRINSIC_INPUTS: usize = 5;

/// Weights and biases of the update network. `w1` is `n_in × 7` and `w2` is
/// `7 × 7`, both row-major (`w1[i * 7 + j]` connects input `i` to unit `j`).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<S> {
    pub n_in: usize,
    /// Antisymmetrize the learned rules under a global spin flip.
    pub odd: bool,
    pub w1: Vec<S>,
    pub b1: Vec<S>,
    pub w2: Vec<S>,
    pub b2: Vec<S>,
    pub w3: Vec<S>,
    pub b3: S,
}

impl<S: Scalar> MlpParams<S> {
    pub fn zeros(n_in: usize) -> Self {
        let z = S::zero();
        Self {
            n_in,
            odd: false,
            w1: vec![z; n_in * HIDDEN],
            b1: vec![z; HIDDEN],
            w2: vec![z; HIDDEN * HIDDEN],
            b2: vec![z; HIDDEN],
            w3: vec![z; HIDDEN],
            b3: z,
        }
    }

    pub fn num_params(&self) -> usize {
        Self::count(self.n_in)
    }

    pub fn count(n_in: usize) -> usize {
        n_in * HIDDEN + HIDDEN + HIDDEN * HIDDEN + HIDDEN + HIDDEN + 1
    }

    /// Parameters in the fixed order `w1, b1, w2, b2, w3, b3`.
    pub fn to_flat(&self) -> Vec<S> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend_from_slice(&self.w1);
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.w2);
        v.extend_from_slice(&self.b2);
        v.extend_from_slice(&self.w3);
        v.push(self.b3);
        v
    }

    pub fn from_flat(n_in: usize, flat: &[S]) -> Result<Self, ConfigError> {
        if flat.len() != Self::count(n_in) {
            return Err(ConfigError::Arity {
                expected: Self::count(n_in),
                got: flat.len(),
            });
        }
        let mut it = flat.iter().copied();
        let mut take = |k: usize| it.by_ref().take(k).collect::<Vec<S>>();
        let w1 = take(n_in * HIDDEN);
        let b1 = take(HIDDEN);
        let w2 = take(HIDDEN * HIDDEN);
        let b2 = take(HIDDEN);
        let w3 = take(HIDDEN);
        let b3 = take(1)[0];
        Ok(Self {
            n_in,
            odd: false,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
        })
    }

    /// Same shape and symmetry setting with new parameter values.
    pub fn with_flat<U: Scalar>(&self, flat: &[U]) -> Result<MlpParams<U>, ConfigError> {
        Ok(MlpParams {
            odd: self.odd,
            ..MlpParams::from_flat(self.n_in, flat)?
        })
    }

    pub fn with_odd_symmetry(self, odd: bool) -> Self {
        Self { odd, ..self }
    }

    pub fn values(&self) -> MlpParams<f64> {
        self.with_flat(&self.to_flat().iter().map(|v| v.value()).collect::<Vec<_>>())
            .expect("same shape")
    }

    /// Network output for one feature vector (unclamped).
    pub fn forward(&self, x: &[S]) -> Result<S, ConfigError> {
        if x.len() != self.n_in {
            return Err(ConfigError::Arity {
                expected: self.n_in,
                got: x.len(),
            });
        }
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_unchecked(&self, x: &[S]) -> S {
        let mut h1 = [S::zero(); HIDDEN];
        for (j, h) in h1.iter_mut().enumerate() {
            let terms = x.iter().enumerate().map(|(i, &xi)| (xi, self.w1[i * HIDDEN + j]));
            *h = S::dot(terms, self.b1[j]).relu();
        }
        let mut h2 = [S::zero(); HIDDEN];
        for (k, h) in h2.iter_mut().enumerate() {
            let terms = h1.iter().enumerate().map(|(j, &hj)| (hj, self.w2[j * HIDDEN + k]));
            *h = S::dot(terms, self.b2[k]).tanh();
        }
        S::dot(h2.iter().copied().zip(self.w3.iter().copied()), self.b3)
    }
}

impl MlpParams<f64> {
    /// Registers every parameter as an independent variable on `tape`.
    pub fn on_tape<'t>(&self, tape: &'t GradTape) -> MlpParams<Var<'t>> {
        let flat: Vec<Var<'t>> = self.to_flat().into_iter().map(|v| tape.var(v)).collect();
        self.with_flat(&flat).expect("same shape")
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }

    /// Text form: header `MLP n_in=<k> h=7`, then one line per tensor with
    /// 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "MLP n_in={} h={} odd={}", self.n_in, HIDDEN, u8::from(self.odd)).unwrap();
        let mut line = |name: &str, vals: &[f64]| {
            out.push_str(name);
            for v in vals {
                write!(out, " {v:.16e}").unwrap();
            }
            out.push('\n');
        };
        line("W1", &self.w1);
        line("b1", &self.b1);
        line("W2", &self.w2);
        line("b2", &self.b2);
        line("w3", &self.w3);
        line("b3", &[self.b3]);
        out
    }

    pub fn from_text(text: &str) -> Result<Self, ModelFileError> {
        let err = |line: usize, msg: String| ModelFileError::Parse { line, msg };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
        let mut n_in = None;
        let mut odd = false;
        let mut toks = header.split_whitespace();
        if toks.next() != Some("MLP") {
            return Err(err(1, "expected `MLP` header".into()));
        }
        for t in toks {
            match t.split_once('=') {
                Some(("n_in", v)) => {
                    n_in = Some(v.parse::<usize>().map_err(|_| err(1, format!("bad n_in `{v}`")))?)
                }
                Some(("h", v)) if v == HIDDEN.to_string() => {}
                Some(("odd", "0")) => odd = false,
                Some(("odd", "1")) => odd = true,
                _ => return Err(err(1, format!("unexpected header field `{t}`"))),
            }
        }
        let n_in = n_in.ok_or_else(|| err(1, "missing n_in".into()))?;
        if n_in == 0 {
            return Err(err(1, "n_in must be positive".into()));
        }
        let expect = [
            ("W1", n_in * HIDDEN),
            ("b1", HIDDEN),
            ("W2", HIDDEN * HIDDEN),
            ("b2", HIDDEN),
            ("w3", HIDDEN),
            ("b3", 1),
        ];
        let mut flat = Vec::with_capacity(Self::count(n_in));
        for (name, len) in expect {
            let (i, raw) = lines
                .next()
                .ok_or_else(|| err(0, format!("truncated: missing `{name}`")))?;
            let line = i + 1;
            let mut toks = raw.split_whitespace();
            if toks.next() != Some(name) {
                return Err(err(line, format!("expected `{name}`")));
            }
            let vals = toks
                .map(|t| t.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| err(line, e.to_string()))?;
            if vals.len() != len {
                return Err(err(line, format!("`{name}` needs {len} values, found {}", vals.len())));
            }
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(err(line, "non-finite value".into()));
            }
            flat.extend(vals);
        }
        if let Some((i, rest)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(err(i + 1, format!("trailing content `{rest}`")));
        }
        Ok(Self::from_flat(n_in, &flat).expect("shape checked").with_odd_symmetry(odd))
    }
}

/// Glorot-uniform weights and zero biases, deterministic per seed.
pub fn init_params(n_in: usize, seed: u64) -> MlpParams<f64> {
    assert!(n_in >= 1, "network needs at least one input");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut glorot = |fan_in: usize, fan_out: usize, len: usize| -> Vec<f64> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        (0..len).map(|_| rng.random_range(-a..a)).collect()
    };
    let w1 = glorot(n_in, HIDDEN, n_in * HIDDEN);
    let w2 = glorot(HIDDEN, HIDDEN, HIDDEN * HIDDEN);
    let w3 = glorot(HIDDEN, 1, HIDDEN);
    MlpParams {
        n_in,
        odd: false,
        w1,
        b1: vec![0.0; HIDDEN],
        w2,
        b2: vec![0.0; HIDDEN],
        w3,
        b3: 0.0,
    }
}

pub fn save_params(params: &MlpParams<f64>, path: impl AsRef<Path>) -> Result<(), ModelFileError> {
    std::fs::write(path, params.to_text())?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<MlpParams<f64>, ModelFileError> {
    MlpParams::from_text(&std::fs::read_to_string(path)?)
}

fn check_arity<S>(params: &MlpParams<S>, expected: usize) -> Result<(), ConfigError> {
    if params.n_in != expected {
        Err(ConfigError::Arity {
            expected: params.n_in,
            got: expected,
        })
    } else {
        Ok(())
    }
}

/// Network output, antisymmetrized over the sign of the `flip` features when
/// the parameters ask for it.
fn evaluate<S: Scalar>(params: &MlpParams<S>, x: &mut [S], flip: &[usize]) -> S {
    let y = params.forward_unchecked(x);
    if !params.odd {
        return y;
    }
    for &i in flip {
        x[i] = -x[i];
    }
    let half = S::from_f64(0.5);
    (y - params.forward_unchecked(x)) * half
}

/// Learned extrinsic factor update `[L_ext, E_nm] ++ side ↦ L_out`.
pub fn neural_fn_update_extrinsic<S: Scalar>(
    params: &MlpParams<S>,
    l_ext: S,
    coupling: S,
    side: &[S],
) -> Result<S, ConfigError> {
    check_arity(params, EXTRINSIC_INPUTS + side.len())?;
    let mut x = Vec::with_capacity(params.n_in);
    x.push(l_ext);
    x.push(coupling);
    x.extend_from_slice(side);
    Ok(evaluate(params, &mut x, &[0]).clamp(-LLR_CLAMP, LLR_CLAMP))
}

/// Learned non-extrinsic factor update for the message `Ψ_nm → x_dst`.
pub fn neural_fn_update<S: Scalar>(
    params: &MlpParams<S>,
    l_ext: S,
    l_intr: S,
    share_src: S,
    coupling: S,
    share_dst: S,
    side: &[S],
) -> Result<S, ConfigError> {
    check_arity(params, NON_EXTRINSIC_INPUTS + side.len())?;
    let mut x = Vec::with_capacity(params.n_in);
    x.extend_from_slice(&[l_ext, l_intr, share_src, coupling, share_dst]);
    x.extend_from_slice(side);
    Ok(evaluate(params, &mut x, &[0, 1, 2, 4]).clamp(-LLR_CLAMP, LLR_CLAMP))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn reference_forward(p: &MlpParams<f64>, x: &[f64]) -> f64 {
        let mut h1 = [0.0; HIDDEN];
        for j in 0..HIDDEN {
            let mut s = p.b1[j];
            for i in 0..p.n_in {
                s += p.w1[i * HIDDEN + j] * x[i];
            }
            h1[j] = s.max(0.0);
        }
        let mut y = p.b3;
        for k in 0..HIDDEN {
            let mut s = p.b2[k];
            for j in 0..HIDDEN {
                s += p.w2[j * HIDDEN + k] * h1[j];
            }
            y += p.w3[k] * s.tanh();
        }
        y
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        assert_eq!(init_params(5, 42), init_params(5, 42));
        assert_ne!(init_params(5, 42), init_params(5, 43));
        let p = init_params(2, 1);
        assert_eq!(p.w1.len(), 14);
        assert_eq!(p.num_params(), 14 + 7 + 49 + 7 + 7 + 1);
        assert!(p.b1.iter().chain(&p.b2).all(|&b| b == 0.0) && p.b3 == 0.0);
        let bound = (6.0f64 / 9.0).sqrt();
        assert!(p.w1.iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn constant_networks() {
        let z = MlpParams::<f64>::zeros(3);
        assert_eq!(z.forward(&[1.0, -2.0, 3.0]).unwrap(), 0.0);
        let mut c = MlpParams::<f64>::zeros(2);
        c.b3 = 1.5;
        assert_eq!(c.forward(&[10.0, -4.0]).unwrap(), 1.5);
    }

    #[test]
    fn arity_is_checked() {
        let p = init_params(2, 0);
        assert_eq!(
            p.forward(&[1.0]),
            Err(ConfigError::Arity { expected: 2, got: 1 })
        );
        assert!(neural_fn_update_extrinsic(&p, 0.0, 0.0, &[1.0]).is_err());
        assert!(neural_fn_update(&p, 0.0, 0.0, 0.0, 0.0, 0.0, &[]).is_err());
    }

    #[test]
    fn forward_matches_reference_implementation() {
        for seed in 0..20 {
            let mut p = init_params(5, seed);
            p.b1.iter_mut().enumerate().for_each(|(i, b)| *b = 0.1 * i as f64 - 0.3);
            p.b3 = -0.2;
            let x = [0.3 * seed as f64 - 2.0, 1.0, -0.5, 2.0, 0.25];
            assert_relative_eq!(p.forward(&x).unwrap(), reference_forward(&p, &x), epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_network_gradient_is_only_in_output_bias() {
        let mut p = MlpParams::<f64>::zeros(2);
        p.b3 = 0.7;
        let tape = GradTape::new();
        let pv = p.on_tape(&tape);
        let y = pv.forward(&[Var::constant(1.0), Var::constant(-1.0)]).unwrap();
        let g = tape.backward(y).unwrap();
        let grads: Vec<f64> = pv.to_flat().iter().map(|&v| g.wrt(v)).collect();
        let last = grads.len() - 1;
        assert_eq!(grads[last], 1.0);
        assert!(grads[..last].iter().all(|&d| d == 0.0));
    }

    #[test]
    fn single_path_gradient_matches_hand_derivative() {
        // Only input 0 → unit 0 → unit 0 → output is active:
        // y = w3 tanh(w2 relu(w1 x + b1) + b2) + b3.
        let mut p = MlpParams::<f64>::zeros(1);
        let (w1, b1, w2, b2, w3, x) = (0.8, 0.1, -1.3, 0.2, 0.9, 0.6);
        p.w1[0] = w1;
        p.b1[0] = b1;
        p.w2[0] = w2;
        p.b2[0] = b2;
        p.w3[0] = w3;
        let tape = GradTape::new();
        let pv = p.on_tape(&tape);
        let xv = tape.var(x);
        let y = pv.forward(&[xv]).unwrap();
        let g = tape.backward(y).unwrap();
        let h = w1 * x + b1;
        let t = (w2 * h + b2).tanh();
        let dt = 1.0 - t * t;
        assert_relative_eq!(y.value(), w3 * t, epsilon = 1e-15);
        assert_relative_eq!(g.wrt(pv.w3[0]), t, epsilon = 1e-12);
        assert_relative_eq!(g.wrt(pv.b2[0]), w3 * dt, epsilon = 1e-12);
        assert_relative_eq!(g.wrt(pv.w2[0]), w3 * dt * h, epsilon = 1e-12);
        assert_relative_eq!(g.wrt(pv.b1[0]), w3 * dt * w2, epsilon = 1e-12);
        assert_relative_eq!(g.wrt(pv.w1[0]), w3 * dt * w2 * x, epsilon = 1e-12);
        assert_relative_eq!(g.wrt(xv), w3 * dt * w2 * w1, epsilon = 1e-12);
    }

    #[test]
    fn learned_updates_are_clamped() {
        use rand::{Rng, SeedableRng};
        let mut p = init_params(2, 9);
        p.w3.iter_mut().for_each(|w| *w *= 50.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100_000 {
            let l = rng.random_range(-1e3..1e3);
            let e = rng.random_range(-50.0..50.0);
            let y = neural_fn_update_extrinsic(&p, l, e, &[]).unwrap();
            assert!(y.is_finite() && y.abs() <= LLR_CLAMP);
        }
    }

    #[test]
    fn zero_network_emits_zero_messages() {
        let z2 = MlpParams::<f64>::zeros(2);
        let z5 = MlpParams::<f64>::zeros(5);
        assert_eq!(neural_fn_update_extrinsic(&z2, 3.0, 1.0, &[]).unwrap(), 0.0);
        assert_eq!(neural_fn_update(&z5, 3.0, -1.0, 0.2, 1.0, 0.4, &[]).unwrap(), 0.0);
    }

    #[test]
    fn feature_order_matters() {
        let p = init_params(5, 3);
        let a = neural_fn_update(&p, 2.0, -1.0, 0.3, 0.5, -0.2, &[]).unwrap();
        let b = neural_fn_update(&p, -1.0, 2.0, 0.3, 0.5, -0.2, &[]).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn text_format_round_trips_bytes() {
        let p = init_params(6, 77);
        let text = p.to_text();
        assert!(text.starts_with("MLP n_in=6 h=7 odd=0\nW1 "));
        let back = MlpParams::from_text(&text).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.to_text(), text);

        let odd = p.clone().with_odd_symmetry(true);
        assert_eq!(MlpParams::from_text(&odd.to_text()).unwrap(), odd);
        let legacy = text.replacen(" odd=0", "", 1);
        assert_eq!(MlpParams::from_text(&legacy).unwrap(), p);
    }

    #[test]
    fn malformed_model_files() {
        let text = init_params(2, 1).to_text();
        let truncated: String = text.lines().take(3).collect::<Vec<_>>().join("\n");
        assert!(matches!(
            MlpParams::from_text(&truncated),
            Err(ModelFileError::Parse { .. })
        ));
        let bad = text.replacen("b1 ", "b1 x ", 1);
        match MlpParams::from_text(&bad) {
            Err(ModelFileError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(MlpParams::from_text("NET n_in=2 h=7\n").is_err());
        assert!(MlpParams::from_text("MLP n_in=2 h=8\n").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = std::env::temp_dir().join(format!("cycbp-mlp-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.txt");
        let p = init_params(5, 5);
        save_params(&p, &path).unwrap();
        let q = load_params(&path).unwrap();
        assert_eq!(p, q);
        let _ = std::fs::remove_dir_all(dir);
    }
}
