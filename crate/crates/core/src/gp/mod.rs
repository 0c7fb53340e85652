//! Gaussian-process regression of path terms.

pub mod kernel;
pub mod regress;

pub use kernel::{
    build_covariance, path_covariance, smooth_covariance, CorrelationLengths, GpHyperparameters, KernelPath,
    PathKey,
};
pub use regress::{
    fit_variances, log_likelihood, predict, FitFile, FrequencyFit, FrequencyRecord, GpFit, GpPrediction, VarianceFit,
    VARIANCE_BOUNDS,
};
