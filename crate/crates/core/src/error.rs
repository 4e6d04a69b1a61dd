use thiserror::Error;

/// Errors produced by the estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("quantile level must lie in (0, 1), got {0}")]
    InvalidQuantile(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("cross-validation grid is empty")]
    EmptyGrid,
    #[error("too few samples: {0}")]
    TooFewSamples(String),
    #[error("bandwidth cannot be evaluated for n = {0}")]
    InvalidSize(usize),
    #[error("degenerate error density at zero for study {study} (f0 = {f0:.3e})")]
    DegenerateDensity { study: usize, f0: f64 },
    #[error("baseline detection loss is zero")]
    ZeroBaselineLoss,
    #[error("m must lie in 1..={k}, got {m}")]
    InvalidM { m: usize, k: usize },
    #[error("Toeplitz band 2k = {band} exceeds p = {p}")]
    BandTooWide { band: usize, p: usize },
    #[error("covariance matrix is not positive semi-definite")]
    NotPsd,
    #[error("informative set member {0} is out of range")]
    InvalidMember(usize),
    #[error("feature {0} has no category")]
    MissingCategory(usize),
    #[error("{0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// Attaches a study index to a density failure.
    pub fn for_study(self, k: usize) -> Self {
        match self {
            Error::DegenerateDensity { f0, .. } => Error::DegenerateDensity { study: k, f0 },
            e => e,
        }
    }

    /// True for failures of the numerical procedures as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateDensity { .. } | Error::ZeroBaselineLoss | Error::NotPsd
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
