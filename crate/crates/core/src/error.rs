use std::path::PathBuf;

/// Errors produced by the simulator and the filter-design routines.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unsupported constellation order {0} (expected 4, 16 or 64)")]
    UnsupportedOrder(usize),

    #[error("bit count {bits} is not a multiple of {per_symbol} bits per symbol")]
    BitCount { bits: usize, per_symbol: usize },

    #[error("stream length {0} is odd; de-staggering needs pairs of half-symbols")]
    OddStreamLength(usize),

    #[error("invalid filter bank parameters: {0}")]
    InvalidFilterBank(String),

    #[error("subcarrier {k} out of range for {m} subcarriers")]
    SubcarrierOutOfRange { k: usize, m: usize },

    #[error("subcarriers {l} and {k} are not adjacent")]
    NotAdjacent { l: usize, k: usize },

    #[error("channel tap delay {delay_s:e} s does not fit into {len} samples at {fs} Hz")]
    DelayOutOfRange { delay_s: f64, len: usize, fs: f64 },

    #[error("invalid channel: {0}")]
    InvalidChannel(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("latency {nu} outside [0, {max}]")]
    LatencyOutOfRange { nu: usize, max: usize },

    #[error("empty latency range")]
    EmptyLatencyRange,

    #[error("equalizer system matrix is not positive definite (subcarrier {k})")]
    Singular { k: usize },

    #[error("duality transform infeasible: {0}")]
    DualityInfeasible(String),

    #[error("config: {0}")]
    Config(String),

    #[error("cell {design} @ {ebn0_db} dB, channel {channel}: {source}")]
    Cell {
        design: String,
        ebn0_db: f64,
        channel: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
