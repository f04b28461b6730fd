use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no samples")]
    NoSamples,
    #[error("undefined rate")]
    UndefinedRate,
    #[error("F1 undefined")]
    F1Undefined,
    #[error("kappa undefined (degenerate marginals)")]
    KappaUndefined,
    #[error("AUROC undefined")]
    AurocUndefined,
    #[error("AUPRC undefined")]
    AuprcUndefined,
    #[error("probability out of range: {0}")]
    ProbabilityOutOfRange(f64),
    #[error("diagnosis weight dominated")]
    DiagnosisWeightDominated,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("training diverged")]
    TrainingDiverged,
    #[error("incomplete study")]
    IncompleteStudy,
    #[error("data leakage: {0} patient(s) shared between training stages")]
    DataLeakage(usize),
    #[error("unknown stratum: {0}")]
    UnknownStratum(String),
    #[error("invalid proportions: {0}")]
    InvalidProportions(String),
    #[error("n too small: {0}")]
    CohortTooSmall(String),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("line {line}: {msg}")]
    MalformedRow { line: u64, msg: String },
    #[error("image smaller than grid")]
    ImageSmallerThanGrid,
    #[error("image dimensions {width}x{height} not divisible by {factor}")]
    NotDivisible { width: usize, height: usize, factor: usize },
    #[error("malformed image: {0}")]
    MalformedImage(String),
    #[error("empty input")]
    EmptyInput,
    #[error("missing predictions: {0}")]
    MissingPredictions(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("output directory is locked: {}", .0.display())]
    Locked(PathBuf),
    #[error("unsupported model document: {0}")]
    Model(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable category, printed by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::InvalidProportions(_) | Error::InvalidArchitecture(_) => {
                "config"
            }
            Error::MissingArtifact(_) => "missing-artifact",
            Error::Locked(_) => "locked",
            Error::Io(_) => "io",
            Error::Json(_) | Error::Csv(_) | Error::MalformedRow { .. } | Error::MissingColumn(_) => {
                "format"
            }
            Error::TrainingDiverged => "diverged",
            Error::DataLeakage(_) => "leakage",
            _ => "runtime",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "missing-artifact" => 3,
            _ => 1,
        }
    }
}
