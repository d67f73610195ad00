//! Scalar reverse-mode gradient tape.
//!
//! A [`GradTape`] is a Wengert list: every primitive evaluated on a tape
//! variable appends one node holding its value and the local partial
//! derivatives with respect to its operands. [`GradTape::backward`] sweeps the
//! list once in reverse. Operations whose operands are all constants are
//! folded and never touch the tape.
//!
//! ```
//! use cycbp::tape::GradTape;
//! use cycbp::Scalar;
//!
//! let tape = GradTape::new();
//! let x = tape.var(0.5);
//! let y = x * x.tanh();
//! let grads = tape.backward(y).unwrap();
//! let dx = 0.5f64.tanh() + 0.5 * (1.0 - 0.5f64.tanh().powi(2));
//! assert!((grads.wrt(x) - dx).abs() < 1e-15);
//! ```

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use crate::error::TapeError;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
struct Node {
    value: f64,
    start: u32,
    len: u32,
}

#[derive(Debug, Default)]
struct TapeInner {
    nodes: Vec<Node>,
    // (operand index, ∂node/∂operand), addressed by Node::start..start+len
    partials: Vec<(u32, f64)>,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct GradTape {
    inner: RefCell<TapeInner>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers an independent variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.push(value, &[]);
        Var {
            tape: Some(self),
            idx,
            val: value,
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Recorded primal values in evaluation order.
    pub fn values(&self) -> Vec<f64> {
        self.inner.borrow().nodes.iter().map(|n| n.value).collect()
    }

    /// Drops every recorded node. Variables created before the call must not
    /// be used afterwards.
    pub fn clear(&mut self) {
        let inner = self.inner.get_mut();
        inner.nodes.clear();
        inner.partials.clear();
    }

    fn push(&self, value: f64, operands: &[(u32, f64)]) -> u32 {
        let mut inner = self.inner.borrow_mut();
        let start = inner.partials.len() as u32;
        inner.partials.extend_from_slice(operands);
        let idx = inner.nodes.len() as u32;
        inner.nodes.push(Node {
            value,
            start,
            len: operands.len() as u32,
        });
        idx
    }

    /// Propagates `d output / d node` to every node recorded before `output`.
    pub fn backward(&self, output: Var<'_>) -> Result<Adjoints, TapeError> {
        self.backward_seeded(output, 1.0)
    }

    pub fn backward_seeded(&self, output: Var<'_>, seed: f64) -> Result<Adjoints, TapeError> {
        let inner = self.inner.borrow();
        if inner.nodes.is_empty() {
            return Err(TapeError::Empty);
        }
        let mut adj = vec![0.0; inner.nodes.len()];
        let Some(tape) = output.tape else {
            // A constant output has no dependence on anything recorded.
            return Ok(Adjoints { adj });
        };
        if !std::ptr::eq(tape, self) {
            return Err(TapeError::ForeignVariable);
        }
        adj[output.idx as usize] = seed;
        for i in (0..=output.idx as usize).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let node = inner.nodes[i];
            let ops = &inner.partials[node.start as usize..(node.start + node.len) as usize];
            for &(p, d) in ops {
                adj[p as usize] += d * a;
            }
        }
        Ok(Adjoints { adj })
    }
}

/// Result of a reverse sweep.
#[derive(Debug, Clone)]
pub struct Adjoints {
    adj: Vec<f64>,
}

impl Adjoints {
    /// Gradient of the swept output with respect to `v`; zero for constants.
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        match v.tape {
            Some(_) => self.adj[v.idx as usize],
            None => 0.0,
        }
    }
}

/// A value that is either a constant or a node on a [`GradTape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t GradTape>,
    idx: u32,
    val: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.tape {
            Some(_) => write!(f, "Var(#{} = {})", self.idx, self.val),
            None => write!(f, "Const({})", self.val),
        }
    }
}

impl<'t> Var<'t> {
    pub fn constant(value: f64) -> Self {
        Var {
            tape: None,
            idx: 0,
            val: value,
        }
    }

    pub fn is_constant(&self) -> bool {
        self.tape.is_none()
    }

    fn unary(self, value: f64, d: f64) -> Self {
        match self.tape {
            None => Var::constant(value),
            Some(t) => Var {
                tape: Some(t),
                idx: t.push(value, &[(self.idx, d)]),
                val: value,
            },
        }
    }

    fn binary(self, other: Self, value: f64, da: f64, db: f64) -> Self {
        let tape = self.tape.or(other.tape);
        match tape {
            None => Var::constant(value),
            Some(t) => {
                let mut ops = [(0u32, 0.0f64); 2];
                let mut n = 0;
                if self.tape.is_some() {
                    ops[n] = (self.idx, da);
                    n += 1;
                }
                if other.tape.is_some() {
                    ops[n] = (other.idx, db);
                    n += 1;
                }
                Var {
                    tape: Some(t),
                    idx: t.push(value, &ops[..n]),
                    val: value,
                }
            }
        }
    }
}

impl Add for Var<'_> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, self.val + rhs.val, 1.0, 1.0)
    }
}

impl Sub for Var<'_> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, self.val - rhs.val, 1.0, -1.0)
    }
}

impl Mul for Var<'_> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, self.val * rhs.val, rhs.val, self.val)
    }
}

impl Div for Var<'_> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let q = self.val / rhs.val;
        self.binary(rhs, q, 1.0 / rhs.val, -q / rhs.val)
    }
}

impl Neg for Var<'_> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(-self.val, -1.0)
    }
}

impl AddAssign for Var<'_> {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl Scalar for Var<'_> {
    fn from_f64(v: f64) -> Self {
        Var::constant(v)
    }

    fn value(self) -> f64 {
        self.val
    }

    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }

    fn ln(self) -> Self {
        self.unary(self.val.ln(), 1.0 / self.val)
    }

    fn tanh(self) -> Self {
        let t = self.val.tanh();
        self.unary(t, 1.0 - t * t)
    }

    fn atanh(self) -> Self {
        self.unary(Scalar::atanh(self.val), 1.0 / (1.0 - self.val * self.val))
    }

    fn relu(self) -> Self {
        if self.val > 0.0 {
            self.unary(self.val, 1.0)
        } else {
            Var::constant(0.0)
        }
    }

    fn clamp(self, lo: f64, hi: f64) -> Self {
        if self.val < lo {
            Var::constant(lo)
        } else if self.val > hi {
            Var::constant(hi)
        } else {
            self
        }
    }

    fn softplus(self) -> Self {
        let z = self.val;
        let value = if z > 0.0 {
            z + (-z).exp().ln_1p()
        } else {
            z.exp().ln_1p()
        };
        let sig = if z >= 0.0 {
            1.0 / (1.0 + (-z).exp())
        } else {
            let e = z.exp();
            e / (1.0 + e)
        };
        self.unary(value, sig)
    }

    fn dot<I: IntoIterator<Item = (Self, Self)>>(terms: I, bias: Self) -> Self {
        let mut value = bias.val;
        let mut tape = bias.tape;
        let mut ops = Vec::with_capacity(16);
        if bias.tape.is_some() {
            ops.push((bias.idx, 1.0));
        }
        for (x, y) in terms {
            value += x.val * y.val;
            if x.tape.is_some() {
                tape = tape.or(x.tape);
                ops.push((x.idx, y.val));
            }
            if y.tape.is_some() {
                tape = tape.or(y.tape);
                ops.push((y.idx, x.val));
            }
        }
        match tape {
            None => Var::constant(value),
            Some(t) => Var {
                tape: Some(t),
                idx: t.push(value, &ops),
                val: value,
            },
        }
    }
}
