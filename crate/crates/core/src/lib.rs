//! Coarse-to-fine GNSS pseudorange-error estimation: feature construction from
//! raw observations, a selective state-space coarse estimator, a conditional
//! diffusion refiner with per-satellite uncertainty, synthetic scenes,
//! training and positioning evaluation.
//!
//! Numeric code is generic over [`scalar::Scalar`]; training and inference run
//! in `f32`, gradient checks in `f64`. The aliases below fix the precision
//! used by the pipeline.

pub mod autodiff;
pub mod coarse;
pub mod diffusion;
pub mod eval;
pub mod gnss;
pub mod model;
pub mod nn;
pub mod par;
pub mod scalar;
pub mod synth;
pub mod train;

/// Pipeline precision.
pub type Real = f32;
pub type Array = autodiff::Tensor<Real>;
pub type Params = autodiff::ParamStore<Real>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] autodiff::TensorError),
    #[error(transparent)]
    Gnss(#[from] gnss::GnssError),
    #[error(transparent)]
    Diffusion(#[from] diffusion::DiffusionError),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Checkpoint(String),
    #[error("{0}")]
    Data(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
