//! GNSS observations, single-point positioning and the per-satellite features
//! fed to the networks.

pub mod features;
pub mod geometry;
pub mod observation;
pub mod spp;

pub use features::{
    augment, build_windows, compute_ls_error, compute_rss, epoch_features, split_dataset, EpochFeatures, FeatureWindow,
    NormStats, SplitSets, WindowConfig, NUM_FEATURES,
};
pub use geometry::Ecef;
pub use observation::{
    load_observations, read_observations, save_observations, write_observations, EpochObservation, SatId,
    SatObservation, SceneLabel, Sequence,
};
pub use spp::{solve_spp, solve_spp_from, solve_spp_with, ReceiverSolution, SppConfig};

#[derive(Debug, thiserror::Error)]
pub enum GnssError {
    #[error("need at least 4 satellites, got {0}")]
    InsufficientSatellites(usize),
    #[error("satellite geometry is singular (condition number {0:.3e})")]
    SingularGeometry(f64),
    #[error("least squares did not converge in {0} iterations")]
    NonConvergence(usize),
    #[error("sequence has {len} epochs, window needs {needed}")]
    WindowTooShort { len: usize, needed: usize },
    #[error("{0} satellites in a window exceed N_max = {1}")]
    TooManySatellites(usize, usize),
    #[error("segment `{0}` has {1} windows, at least 10 are needed to split")]
    SegmentTooSmall(String, usize),
    #[error("invalid epoch: {0}")]
    InvalidEpoch(String),
    #[error("unit sanity check failed: {0}")]
    UnitSanity(String),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
}
