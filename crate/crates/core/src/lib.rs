//! Post-hoc, task-agnostic out-of-distribution scoring on exported feature
//! matrices.
//!
//! The main detector clusters in-distribution features with a full-covariance
//! Gaussian mixture, scores a test feature by the negated minimum squared
//! Mahalanobis distance to the clusters ([`tapmb`]), and ensembles that score
//! over a list of cluster counts ([`ensemble`]). Baselines, metrics, a
//! synthetic data generator and file formats round out the toolkit.
//!
//! All scores follow one convention: higher means more in-distribution.

pub mod error;
pub mod stats;
pub mod gmm;
pub mod scorer;
pub mod tapmb;
pub mod ensemble;
pub mod tapmos;
pub mod baselines;
pub mod metrics;
pub mod synth;
pub mod io;
pub mod archive;
pub mod landscape;

pub use error::{Error, Result};
pub use scorer::Scorer;
pub use stats::{ClusterStats, FeatureMatrix, SquareMatrix};
