//! Scalar abstraction shared by plain floating point evaluation and the
//! gradient tape.
//!
//! Every numeric routine in this crate (message passing, Bethe free energy,
//! losses, the update network) is written once against [`Scalar`]. Running it
//! with `f64` or `f32` evaluates it; running it with [`crate::tape::Var`]
//! records it for reverse-mode differentiation.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use num_traits::{Float, FromPrimitive};

/// A real number type the inference engine can compute with.
pub trait Scalar:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    fn from_f64(v: f64) -> Self;

    /// Primal value, used for comparisons and branch decisions.
    fn value(self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn atanh(self) -> Self;

    /// `max(self, 0)`; the derivative is zero on the negative half line.
    fn relu(self) -> Self;

    /// Saturating clamp to `[lo, hi]` with zero derivative outside.
    fn clamp(self, lo: f64, hi: f64) -> Self;

    /// `ln(1 + e^self)` without overflow.
    fn softplus(self) -> Self;

    /// `bias + Σ a_i b_i` over `(a_i, b_i)` pairs.
    fn dot<I: IntoIterator<Item = (Self, Self)>>(terms: I, bias: Self) -> Self {
        terms.into_iter().fold(bias, |acc, (x, y)| acc + x * y)
    }

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn one() -> Self {
        Self::from_f64(1.0)
    }

    /// Logistic function `1 / (1 + e^{-self})`.
    fn sigmoid(self) -> Self {
        (-(-self).softplus()).exp()
    }

    /// `ln σ(self) = -softplus(-self)`.
    fn log_sigmoid(self) -> Self {
        -(-self).softplus()
    }

    /// Lower clamp used before taking logarithms of probabilities.
    fn floor_at(self, floor: f64) -> Self {
        self.clamp(floor, f64::INFINITY)
    }
}

impl<T> Scalar for T
where
    T: Float + FromPrimitive + Debug + AddAssign,
{
    fn from_f64(v: f64) -> Self {
        T::from_f64(v).expect("f64 is representable")
    }

    fn value(self) -> f64 {
        self.to_f64().expect("finite float converts")
    }

    fn exp(self) -> Self {
        Float::exp(self)
    }

    fn ln(self) -> Self {
        Float::ln(self)
    }

    fn tanh(self) -> Self {
        Float::tanh(self)
    }

    fn atanh(self) -> Self {
        // Evaluated on |x| so that atanh(-x) == -atanh(x) bit for bit.
        let a = self.abs();
        let one = T::one();
        let half = (one + one).recip();
        (((one + one) * a / (one - a)).ln_1p() * half).copysign(self)
    }

    fn relu(self) -> Self {
        if self > T::zero() {
            self
        } else {
            T::zero()
        }
    }

    fn clamp(self, lo: f64, hi: f64) -> Self {
        let v = self.value();
        if v < lo {
            <T as Scalar>::from_f64(lo)
        } else if v > hi {
            <T as Scalar>::from_f64(hi)
        } else {
            self
        }
    }

    fn softplus(self) -> Self {
        let z = self;
        if z > T::zero() {
            z + Float::ln_1p(Float::exp(-z))
        } else {
            Float::ln_1p(Float::exp(z))
        }
    }
}

/// Numerically stable `ln(e^a + e^b + ...)` over a slice.
pub fn log_sum_exp<S: Scalar>(terms: &[S]) -> S {
    let max = terms
        .iter()
        .map(|t| t.value())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return S::from_f64(max);
    }
    let shift = S::from_f64(max);
    let sum = terms
        .iter()
        .fold(S::zero(), |acc, &t| acc + (t - shift).exp());
    sum.ln() + shift
}

/// Normalizes log-weights into probabilities.
pub fn softmax<S: Scalar, const K: usize>(logits: [S; K]) -> [S; K] {
    let lse = log_sum_exp(&logits);
    logits.map(|z| (z - lse).exp())
}

/// Pairwise summation in a fixed association order, so reductions are
/// reproducible regardless of how the summands were produced.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n if n <= 8 => values.iter().sum(),
        n => {
            let (lo, hi) = values.split_at(n / 2);
            pairwise_sum(lo) + pairwise_sum(hi)
        }
    }
}

pub fn pairwise_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(values) / values.len() as f64
}
