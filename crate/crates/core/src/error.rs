use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("alphabet size must be in 2..=256, got {0}")]
    InvalidAlphabet(usize),

    #[error("state index overflow: {q} sites over {p} symbols exceed the 62-bit index width")]
    IndexOverflow { q: usize, p: usize },

    #[error("state index {index} out of range for {num_states} states")]
    IndexOutOfRange { index: u64, num_states: u64 },

    #[error("state space of {q} sites over {p} symbols needs {bits:.1} bits, guard allows {guard}")]
    StateSpaceTooLarge {
        q: usize,
        p: usize,
        bits: f64,
        guard: u32,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("symbol {symbol} at site {site} is not below alphabet size {p}")]
    SymbolOutOfRange { site: usize, symbol: u8, p: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("support hole: reverse kernel denominator underflowed at step {step}")]
    SupportHole { step: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
