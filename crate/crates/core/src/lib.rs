//! Conformal calibration for two-module cascades `z = g(f(x))`.
//!
//! Each module is calibrated on its own validation data. The errors of the
//! learned upstream module are propagated through the learned downstream
//! module, combined with the downstream residuals through a quantile-sum
//! bound, and turned into an interval around `g_hat(f_hat(x))`. A
//! cluster-level variant fits one bound per region of the intermediate space.

pub mod baselines;
pub mod cluster_level;
pub mod conformal;
pub mod error;
pub mod harness;
pub mod models;
pub mod quantile;
pub mod seed;
pub mod set_level;

pub use cluster_level::{
    assign_cluster, fit_cluster_level, kmeans, match_clusters, predict_cluster_level,
    ClusterCalibrator, ClusterModel, ClusterPartition,
};
pub use conformal::{evaluate, fit_split, predict_interval, CoverageReport, PredictionInterval};
pub use error::{Error, Result};
pub use quantile::{
    empirical_quantile, quantile_sum_bound, weighted_quantile, ExtendedReal, QuantileMode,
    ScoreSet, WeightedScoreSet,
};
pub use set_level::{
    downstream_errors, fit_set_level, predict_set_level, upstream_propagated_errors,
    DownstreamValidationSet, SetLevelCalibrator, UpstreamValidationSet,
};
