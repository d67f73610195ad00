//! Belief propagation on binary pairwise factor graphs with sum-product,
//! damped, concave-convex and learned factor updates.
//!
//! Everything numeric is generic over [`Scalar`], implemented for `f32`,
//! `f64` and the reverse-mode [`tape::Var`]. The aliases below fix the
//! scalar to `f64`, which is what the experiments use.

pub mod beliefs;
pub mod bethe;
pub mod cccp;
pub mod channel;
pub mod error;
pub mod graph;
pub mod neural;
pub mod oracle;
pub mod rng;
pub mod scalar;
pub mod spa;
pub mod tape;
pub mod training;

pub use beliefs::BeliefSet;
pub use error::{ConfigError, GraphError, ModelFileError, OracleError, TapeError};
pub use graph::PairwiseFactorGraph;
pub use neural::MlpParams;
pub use scalar::Scalar;
pub use spa::{run_message_passing, RunConfig, UpdateRule};

pub type FactorGraph = PairwiseFactorGraph<f64>;
pub type FactorGraphF32 = PairwiseFactorGraph<f32>;
pub type Beliefs = BeliefSet<f64>;
pub type BeliefsF32 = BeliefSet<f32>;
pub type Mlp = MlpParams<f64>;
pub type MlpF32 = MlpParams<f32>;
