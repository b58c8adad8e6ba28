use std::path::PathBuf;

/// Errors produced by every fallible operation in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, found {found}")]
    Dimension {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("matrix is empty")]
    EmptyMatrix,

    #[error("{what} contains a non-finite value")]
    NonFinite { what: &'static str },

    #[error(
        "power iteration did not converge after {iterations} iterations (last estimate {estimate})"
    )]
    NoConvergence { estimate: f64, iterations: usize },

    #[error("label {label} is out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("invalid network specification: {0}")]
    InvalidNetwork(String),

    #[error("invalid perturbation specification: {0}")]
    InvalidPerturbation(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("layer {layer} is outside the admissible range {range}")]
    LayerOutOfRange { layer: usize, range: String },

    #[error("corner enumeration needs 2^{count} evaluations, above the cap of 2^{max}")]
    TooManyCorners { count: usize, max: usize },

    #[error("layer {layer} has a zero {which} norm")]
    ZeroNorm { layer: usize, which: &'static str },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("requested {requested} samples but the dataset holds {available}")]
    NotEnoughSamples { requested: usize, available: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error("non-finite gradient at attack step {step}")]
    NonFiniteGradient { step: usize },

    #[error("IDX parse error in {path} at byte offset {offset}: {reason}")]
    Idx {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("invalid CSV document: {0}")]
    CsvFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dimension(
        op: &'static str,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        Error::Dimension {
            op,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    /// True for failures caused by numerical blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Diverged { .. }
                | Error::NonFiniteGradient { .. }
                | Error::NoConvergence { .. }
                | Error::NonFinite { .. }
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_) | Error::Idx { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
