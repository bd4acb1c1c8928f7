use thiserror::Error;

/// Errors raised by the network engine, the degradation lab and the metrics.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("width error: {0}")]
    Width(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("verification failure: {identity} deviates by {deviation:e}")]
    Verification { identity: String, deviation: f64 },

    #[error("prefix decomposition failure at layer {layer}: deviation {deviation:e}")]
    Decomposition { layer: usize, deviation: f64 },

    #[error("incompatible checkpoints, mismatched fields: {}", .0.join(", "))]
    Compatibility(Vec<String>),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
