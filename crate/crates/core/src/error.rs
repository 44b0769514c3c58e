use qrx_sdp::SdpError;
use thiserror::Error;

/// Errors surfaced by the protocol pipeline.
///
/// A protocol abort (count test failed) is a regular outcome, not an error;
/// these variants cover malformed inputs and numerical breakdowns only.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid parameters: {0}")]
    Params(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("input entropy exhausted: {0}")]
    Exhausted(String),

    #[error("certificate rejected: {0}")]
    Certificate(String),

    #[error("relaxation solve failed: {0}")]
    Sdp(#[from] SdpError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}
