use thiserror::Error;

/// Errors produced anywhere in the platoon stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("vehicles overlap (gap {gap:.3} m)")]
    Collision { gap: f64 },

    #[error("invalid sampling time {ts} s (driveline constant {driveline} 1/s)")]
    InvalidSampleTime { ts: f64, driveline: f64 },

    #[error("degenerate training window: {0}")]
    DegenerateWindow(String),

    #[error("kernel matrix not positive definite after jitter {jitter:e}")]
    NotPositiveDefinite { jitter: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("infeasible static bounds: {0}")]
    InfeasibleBounds(String),

    #[error("enumeration limited to {limit} binaries, program has {count}")]
    TooManyBinaries { count: usize, limit: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("wire format: {0}")]
    Wire(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
