use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure category, mapped onto process exit codes by the command-line tool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Validation,
    Numerical,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 1,
            ErrorKind::Validation => 2,
            ErrorKind::Numerical => 3,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: malformed line: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("line {line}: dangling edge endpoint `{id}`")]
    DanglingEndpoint { line: usize, id: String },
    #[error("line {line}: asymmetric edge list: edge `{u} {v}` must be listed as u<v")]
    AsymmetricEdge { line: usize, u: String, v: String },
    #[error("line {line}: duplicate edge `{u} {v}`")]
    DuplicateEdge { line: usize, u: String, v: String },
    #[error("line {line}: self-loop on node `{id}`")]
    SelfLoop { line: usize, id: String },
    #[error("line {line}: empty token sequence for node `{id}`")]
    EmptyTokens { line: usize, id: String },
    #[error("line {line}: duplicate node id `{id}`")]
    DuplicateNode { line: usize, id: String },
    #[error("line {line}: labels must be given for every node or for none")]
    PartialLabels { line: usize },
    #[error("header declares {declared} {what}, file contains {found}")]
    CountMismatch {
        what: &'static str,
        declared: usize,
        found: usize,
    },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("{name} = {value} is out of range ({expected})")]
    OutOfRange {
        name: &'static str,
        value: String,
        expected: String,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("node {0} is isolated")]
    IsolatedNode(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid span ({start}, {end}) for a sequence of {len} tokens")]
    InvalidSpan {
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("insufficient candidates: {0}")]
    InsufficientCandidates(String),
    #[error("could not generate a graph without isolated nodes after {0} attempts")]
    GenerationFailed(usize),

    #[error("non-finite {term} loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        term: &'static str,
        epoch: usize,
        batch: usize,
    },
    #[error("singular linear system: {0}")]
    Singular(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::OutOfRange { .. } | Error::Config(_) => ErrorKind::Usage,
            Error::NonFiniteLoss { .. } | Error::Singular(_) => ErrorKind::Numerical,
            _ => ErrorKind::Validation,
        }
    }

    pub(crate) fn out_of_range(
        name: &'static str,
        value: impl ToString,
        expected: impl ToString,
    ) -> Self {
        Error::OutOfRange {
            name,
            value: value.to_string(),
            expected: expected.to_string(),
        }
    }
}
