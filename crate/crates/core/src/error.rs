use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("newick syntax error at byte {pos}: {msg}")]
    NewickSyntax { pos: usize, msg: String },
    #[error("node is not bifurcating: {0}")]
    NotBifurcating(String),
    #[error("invalid taxon set: {0}")]
    InvalidTaxa(String),
    #[error("unknown taxon label `{0}`")]
    UnknownTaxon(String),
    #[error("duplicate taxon label `{0}`")]
    DuplicateTaxon(String),
    #[error("invalid tree: {0}")]
    InvalidTree(String),
    #[error("unsupported taxon count {n}: {reason}")]
    TaxaOutOfRange { n: usize, reason: &'static str },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("not a valid Dirichlet embedding: {0}")]
    NotAnEmbedding(String),
    #[error("fasta error: {0}")]
    Fasta(String),
    #[error("taxa mismatch: {0}")]
    TaxaMismatch(String),
    #[error("missing branch length for edge {0}")]
    MissingBranchLength(usize),
    #[error("negative or non-finite branch length {value} on edge {edge}")]
    InvalidBranchLength { edge: usize, value: f64 },
    #[error("likelihood is zero (log-likelihood is -inf) at site pattern {0}")]
    ZeroLikelihood(usize),
    #[error("tree is outside the SBN support")]
    OutOfSupport,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
