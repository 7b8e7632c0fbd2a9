//! Doubly robust estimation of average outcomes from clustered data with
//! missing responses.
//!
//! The estimator combines an outcome regression with inverse propensity
//! weighting, so the point estimate stays consistent when either nuisance
//! model is correct. Because individuals within a cluster may be arbitrarily
//! dependent, inference aggregates estimated influence values to cluster
//! sums before forming a variance; the usual independent-observations
//! variance is kept only as a comparison baseline. A sequential variant
//! adjusts on summaries of each individual's within-cluster history instead
//! of the current covariates alone.
//!
//! The `simulation` module holds the data generating processes and Monte
//! Carlo drivers used to validate coverage, robustness to nuisance model
//! misspecification, and the growth of the cluster variance scale.

pub mod data;
pub mod error;
pub mod estimators;
pub mod nuisance;
pub mod numeric;
pub mod rng;
pub mod simulation;
pub mod variance;

pub use data::{split_clusters, Cluster, ClusterPanel, ClusteredDataset, IndividualRecord};
pub use error::{Error, Result};
pub use estimators::{
    contribution_panel, estimate_dr, estimate_dr_sequential, estimate_dr_sequential_detail,
    estimate_ipw, estimate_plugin, influence_values, observed_mean, summarize_history,
    summarized_dataset, EstimateReport, EstimatorKind, SequentialFit, SummaryConfig,
};
pub use nuisance::{
    assign_folds, cross_fit, fit_nuisances, predict_panel, FeatureMap, GlmFit, Link, NuisanceFit,
    NuisanceMaps, PredictionPanel,
};
pub use variance::{
    cluster_bootstrap, var_cluster_robust, var_iid, wald_ci, BootstrapConfig, BootstrapMode,
    BootstrapTarget, VarianceMethod, VarianceReport,
};

/// Version stamp carried in serialized reports.
pub const LIBRARY_VERSION: &str = env!("CARGO_PKG_VERSION");
