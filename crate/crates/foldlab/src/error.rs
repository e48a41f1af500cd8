use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point {point:?} lies outside the domain (coordinate {axis})")]
    OutOfDomain { point: [f64; 4], axis: usize },

    #[error("jet order {0} exceeds the supported maximum of 4")]
    OrderTooHigh(usize),

    #[error("finite-difference stencil of half-width {reach} does not fit at {point:?}")]
    InsufficientMargin { point: [f64; 4], reach: f64 },

    #[error("no closed-form derivative for multi-index {0:?}")]
    MissingClosedForm([u8; 4]),

    #[error("curvature condition violated: {what} vanishes near t = {t}")]
    Curvature { what: String, t: f64 },

    #[error("degenerate frame: {0}")]
    DegenerateFrame(String),

    #[error("normalization failed: {0}")]
    Normalization(String),

    #[error("nonlinear solve failed: {0}")]
    Solve(String),

    #[error("discretization too coarse: {0}")]
    Resolution(String),

    #[error("invalid configuration: {message}")]
    Config { message: String, suggestions: Vec<String> },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(message: impl Into<String>) -> Self {
        Error::Config { message: message.into(), suggestions: Vec::new() }
    }

    pub fn config_with(message: impl Into<String>, suggestions: Vec<String>) -> Self {
        Error::Config { message: message.into(), suggestions }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
