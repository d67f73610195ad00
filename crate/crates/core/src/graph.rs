//! Binary pairwise factor graphs in log-domain parameterization.
//!
//! A graph over spins `x_n ∈ {+1, -1}` is described by unary fields `E_n`
//! (factor `ψ_n(x) = exp(E_n x)`) and edge couplings `E_nm`
//! (factor `ψ_nm(x_n, x_m) = exp(E_nm x_n x_m)`). Edges are stored with
//! `n < m`; a directed message slot is addressed by `(edge, side)` where side
//! 0 is the lower endpoint `n` and side 1 is `m`.

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::error::GraphError;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge<S> {
    pub n: usize,
    pub m: usize,
    pub coupling: S,
}

impl<S> Edge<S> {
    /// Variable at `side` (0 → n, 1 → m).
    pub fn endpoint(&self, side: usize) -> usize {
        if side == 0 {
            self.n
        } else {
            self.m
        }
    }
}

/// Incidence of an edge at a variable: the edge index and which endpoint the
/// variable is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Incidence {
    pub edge: usize,
    pub side: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseFactorGraph<S> {
    unary: Vec<S>,
    edges: Vec<Edge<S>>,
    adjacency: Vec<Vec<Incidence>>,
}

impl<S: Scalar> PairwiseFactorGraph<S> {
    /// Builds a graph from unary fields and `(n, m, coupling)` triples.
    /// Endpoints may be given in either order; edge order is preserved.
    pub fn new(unary: Vec<S>, edges: &[(usize, usize, S)]) -> Result<Self, GraphError> {
        let num_vars = unary.len();
        if num_vars == 0 {
            return Err(GraphError::NoVariables);
        }
        for (n, e) in unary.iter().enumerate() {
            if !e.value().is_finite() {
                return Err(GraphError::NonFinite(format!("unary[{n}]")));
            }
        }
        let mut seen = HashSet::with_capacity(edges.len());
        let mut stored = Vec::with_capacity(edges.len());
        let mut adjacency = vec![Vec::new(); num_vars];
        for (idx, &(a, b, coupling)) in edges.iter().enumerate() {
            if a >= num_vars || b >= num_vars {
                return Err(GraphError::IndexOutOfRange(a, b, num_vars));
            }
            if a == b {
                return Err(GraphError::SelfLoop(a));
            }
            let (n, m) = if a < b { (a, b) } else { (b, a) };
            if !seen.insert((n, m)) {
                return Err(GraphError::DuplicateEdge(n, m));
            }
            if !coupling.value().is_finite() {
                return Err(GraphError::NonFinite(format!("coupling ({n}, {m})")));
            }
            adjacency[n].push(Incidence { edge: idx, side: 0 });
            adjacency[m].push(Incidence { edge: idx, side: 1 });
            stored.push(Edge { n, m, coupling });
        }
        Ok(Self {
            unary,
            edges: stored,
            adjacency,
        })
    }

    /// Fully connected graph on `unary.len()` variables with couplings listed
    /// in lexicographic pair order (0,1), (0,2), ..., (N-2,N-1).
    pub fn fully_connected(unary: Vec<S>, couplings: &[S]) -> Result<Self, GraphError> {
        let n = unary.len();
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|a| ((a + 1)..n).map(move |b| (a, b)))
            .collect();
        if pairs.len() != couplings.len() {
            return Err(GraphError::Parse {
                line: 0,
                msg: format!("expected {} couplings, got {}", pairs.len(), couplings.len()),
            });
        }
        let edges: Vec<_> = pairs
            .iter()
            .zip(couplings)
            .map(|(&(a, b), &c)| (a, b, c))
            .collect();
        Self::new(unary, &edges)
    }

    pub fn num_vars(&self) -> usize {
        self.unary.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn unary(&self) -> &[S] {
        &self.unary
    }

    pub fn edges(&self) -> &[Edge<S>] {
        &self.edges
    }

    pub fn incident(&self, n: usize) -> &[Incidence] {
        &self.adjacency[n]
    }

    /// Number of pairwise factors attached to variable `n`.
    pub fn variable_degree(&self, n: usize) -> usize {
        self.adjacency[n].len()
    }

    /// Re-expresses the parameters in another scalar type.
    pub fn cast<U: Scalar>(&self) -> PairwiseFactorGraph<U> {
        PairwiseFactorGraph {
            unary: self.unary.iter().map(|e| U::from_f64(e.value())).collect(),
            edges: self
                .edges
                .iter()
                .map(|e| Edge {
                    n: e.n,
                    m: e.m,
                    coupling: U::from_f64(e.coupling.value()),
                })
                .collect(),
            adjacency: self.adjacency.clone(),
        }
    }

    /// Multiplies every parameter by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let f = S::from_f64(factor);
        Self {
            unary: self.unary.iter().map(|&e| e * f).collect(),
            edges: self
                .edges
                .iter()
                .map(|e| Edge {
                    coupling: e.coupling * f,
                    ..*e
                })
                .collect(),
            adjacency: self.adjacency.clone(),
        }
    }

    /// Splits every unary field evenly over the incident pairwise factors.
    pub fn cluster_unaries(&self) -> ClusteredGraph<S> {
        let share: Vec<S> = (0..self.num_vars())
            .map(|n| match self.variable_degree(n) {
                0 => S::zero(),
                d => self.unary[n] / S::from_f64(d as f64),
            })
            .collect();
        let residual_unary = (0..self.num_vars())
            .map(|n| {
                if self.variable_degree(n) == 0 {
                    self.unary[n]
                } else {
                    S::zero()
                }
            })
            .collect();
        let edges = self
            .edges
            .iter()
            .map(|e| ClusteredEdge {
                n: e.n,
                m: e.m,
                share_n: share[e.n],
                coupling: e.coupling,
                share_m: share[e.m],
            })
            .collect();
        ClusteredGraph {
            num_vars: self.num_vars(),
            edges,
            residual_unary,
        }
    }

    /// Line-oriented text form: `N <n>`, then `U <n> <E_n>`, then
    /// `E <n> <m> <E_nm>`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "N {}", self.num_vars()).unwrap();
        for (n, e) in self.unary.iter().enumerate() {
            writeln!(out, "U {n} {:.16e}", e.value()).unwrap();
        }
        for e in &self.edges {
            writeln!(out, "E {} {} {:.16e}", e.n, e.m, e.coupling.value()).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, GraphError> {
        let parse_err = |line: usize, msg: &str| GraphError::Parse {
            line,
            msg: msg.to_string(),
        };
        let mut num_vars = None;
        let mut unary: Vec<Option<f64>> = Vec::new();
        let mut edges = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let toks: Vec<&str> = raw.split_whitespace().collect();
            let Some(&tag) = toks.first() else { continue };
            let int = |s: &str| s.parse::<usize>().map_err(|_| parse_err(line, "bad index"));
            let real = |s: &str| s.parse::<f64>().map_err(|_| parse_err(line, "bad number"));
            match (tag, toks.len()) {
                ("N", 2) => {
                    if num_vars.is_some() {
                        return Err(parse_err(line, "repeated header"));
                    }
                    let n = int(toks[1])?;
                    num_vars = Some(n);
                    unary = vec![None; n];
                }
                ("U", 3) => {
                    let n = int(toks[1])?;
                    let slot = unary
                        .get_mut(n)
                        .ok_or_else(|| parse_err(line, "unary index out of range"))?;
                    *slot = Some(real(toks[2])?);
                }
                ("E", 4) => edges.push((int(toks[1])?, int(toks[2])?, S::from_f64(real(toks[3])?))),
                _ => return Err(parse_err(line, "unrecognized record")),
            }
        }
        if num_vars.is_none() {
            return Err(parse_err(1, "missing `N` header"));
        }
        let unary = unary
            .into_iter()
            .map(|u| S::from_f64(u.unwrap_or(0.0)))
            .collect();
        Self::new(unary, &edges)
    }
}

/// One clustered factor `Ψ_nm = Ψ_n ψ_nm Ψ_m`, fully described by three
/// scalars.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusteredEdge<S> {
    pub n: usize,
    pub m: usize,
    pub share_n: S,
    pub coupling: S,
    pub share_m: S,
}

impl<S: Copy> ClusteredEdge<S> {
    /// Unary share at `side` (0 → n, 1 → m).
    pub fn share(&self, side: usize) -> S {
        if side == 0 {
            self.share_n
        } else {
            self.share_m
        }
    }
}

/// A graph whose unary factors have been merged into the pairwise factors.
/// Isolated variables keep their field in `residual_unary`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredGraph<S> {
    pub num_vars: usize,
    pub edges: Vec<ClusteredEdge<S>>,
    pub residual_unary: Vec<S>,
}

/// A joint configuration of all spins.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment(Vec<i8>);

impl Assignment {
    pub fn new(spins: Vec<i8>) -> Option<Self> {
        spins
            .iter()
            .all(|&s| s == 1 || s == -1)
            .then_some(Self(spins))
    }

    /// Bit `n` of `index` set ↔ `x_n = -1`. Enumerating `0..2^N` visits every
    /// assignment once.
    pub fn from_index(index: u64, num_vars: usize) -> Self {
        Self(
            (0..num_vars)
                .map(|n| if index >> n & 1 == 1 { -1 } else { 1 })
                .collect(),
        )
    }

    pub fn spins(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}
