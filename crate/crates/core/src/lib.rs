//! Cluster-based hybrid spatio-temporal copula interpolation.
//!
//! The pipeline, in order:
//!
//! 1. [`ingest`]: station CSVs resampled onto monthly (or coarser) buckets.
//! 2. [`cluster`]: radius-bounded hierarchical clustering of stations.
//! 3. [`gapfill`]: per-station bidirectional LSTM imputation of missing cells.
//! 4. [`lagdep`]: spatial/temporal influence ratios and their lag-dependence functions.
//! 5. [`evd`]: extreme-value margins (including the blended form) fitted by maximum likelihood.
//! 6. [`copula`]: Gumbel–Hougaard dependence between the spatial and temporal margins.
//! 7. [`interpolate`]: constrained argmax over the joint density and the donor formula.
//! 8. [`eval`]: RMSE/MAE under random holdout and leave-one-station-out.
//!
//! [`pipeline`] chains the stages behind one configuration.

pub mod cluster;
pub mod copula;
pub mod eval;
pub mod evd;
pub mod gapfill;
pub mod ingest;
pub mod interpolate;
pub mod lagdep;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod quad;
pub mod synthetic;

pub use model::{ClusterAssignment, Granularity, ObservationMatrix, Station, TimeAxis, Violation};

/// Fixed six-decimal rendering used by every numeric export.
pub fn fmt6(x: f64) -> String {
    format!("{x:.6}")
}
