use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or image extents do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A NaN or infinity showed up where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A caller broke an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// Fewer proposals than ground-truth points; one-to-one matching is impossible.
    #[error("infeasible matching: {proposals} proposals for {targets} ground-truth points")]
    Infeasible { proposals: usize, targets: usize },

    /// Rejection sampling could not place the requested cells.
    #[error("density infeasible: placed {placed} of {requested} cells with min separation {min_separation}")]
    DensityInfeasible {
        placed: usize,
        requested: usize,
        min_separation: f64,
    },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Data on disk or in memory violates a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// Invalid configuration value; the message names the field.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint format or shape mismatch.
    #[error("version error: {0}")]
    Version(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Numeric(_) => "numeric",
            Error::Contract(_) => "contract",
            Error::Infeasible { .. } => "infeasible",
            Error::DensityInfeasible { .. } => "density_infeasible",
            Error::Io { .. } => "io",
            Error::Validation(_) => "validation",
            Error::Config(_) => "config",
            Error::Version(_) => "version",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
