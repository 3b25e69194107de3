use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("transmit beamformer must have unit norm, got {0}")]
    NonUnitBeamformer(f64),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("input too short: need at least {min}, got {len} ({what})")]
    TooShort {
        what: &'static str,
        min: usize,
        len: usize,
    },

    #[error("no local maxima found on the search grid")]
    NoLocalMaxima,

    #[error("empty noise subspace: model order {order} fills dimension {dim}")]
    EmptyNoiseSubspace { order: usize, dim: usize },

    #[error("zero noise power")]
    ZeroNoisePower,

    #[error("finite-difference step {step} too large: curvature is not quadratic (relative spread {spread:.3e})")]
    StepTooLarge { step: f64, spread: f64 },

    #[error(
        "infeasible ellipsoid: aggregate range {aggregate} m does not exceed baseline {baseline} m"
    )]
    InfeasibleEllipsoid { aggregate: f64, baseline: f64 },

    #[error("empty candidate list")]
    NoCandidates,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed tensor dump: {0}")]
    TensorFormat(String),

    #[error("config parse error: {0}")]
    ConfigParse(#[from] toml::de::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
