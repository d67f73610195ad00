use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("graph needs at least one variable")]
    NoVariables,
    #[error("edge ({0}, {1}) references a variable outside 0..{2}")]
    IndexOutOfRange(usize, usize, usize),
    #[error("edge ({0}, {0}) is a self loop")]
    SelfLoop(usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("non-finite parameter {0}")]
    NonFinite(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("exact enumeration limited to {max} variables, graph has {n}")]
    Capacity { n: usize, max: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("backward called on an empty tape")]
    Empty,
    #[error("output variable belongs to a different tape")]
    ForeignVariable,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{0}")]
    Invalid(String),
    #[error("update rule {0} requires network parameters")]
    MissingParams(&'static str),
    #[error("network expects {expected} inputs, got {got}")]
    Arity { expected: usize, got: usize },
}

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("training diverged in all {restarts} restart(s)")]
    Diverged { restarts: usize },
}
