//! Variance estimation for the point estimators: a naive iid sample
//! variance, a cluster-robust estimator built from per-cluster sums of the
//! influence-style values, Wald intervals, and a cluster bootstrap.
//!
//! The cluster-robust statistic is
//!   omega_hat = (1/n) sum_g T_g^2 - (1/n) sum_g n_g^2 theta_hat^2,
//! with T_g the cluster sum of the influence-style values. It can come out
//! non-positive in degenerate samples; it is then reported as-is, flagged,
//! and no interval is built.

use crate::data::{ClusterPanel, ClusteredDataset};
use crate::error::{Error, Result};
use crate::estimators::{contribution_panel, EstimatorKind, SummaryConfig};
use crate::nuisance::{cross_fit, NuisanceMaps, PredictionPanel};
use crate::numeric::{normal_quantile, KahanSum};
use crate::rng::{stream, subseed, StreamRole};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMethod {
    None,
    Iid,
    ClusterRobust,
    ClusterBootstrap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapMode {
    /// Reuse the original out-of-fold predictions for resampled clusters.
    FixedNuisances,
    /// Re-run cross-fitting on every resampled dataset.
    RefitNuisances,
}

/// Output of a variance estimator. `estimate_variance` is the variance of
/// the point estimate (already divided by n where applicable).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub method: VarianceMethod,
    pub estimate_variance: f64,
    pub omega_hat: Option<f64>,
    pub degenerate: bool,
    pub bootstrap_reps: Option<usize>,
    pub bootstrap_mode: Option<BootstrapMode>,
    pub percentile_ci: Option<(f64, f64)>,
    pub redraws: Option<usize>,
}

impl VarianceReport {
    fn point(method: VarianceMethod, estimate_variance: f64) -> Self {
        Self {
            method,
            estimate_variance,
            omega_hat: None,
            degenerate: false,
            bootstrap_reps: None,
            bootstrap_mode: None,
            percentile_ci: None,
            redraws: None,
        }
    }
}

/// Sample variance of the values divided by n; valid only under
/// within-cluster independence, kept as the comparison baseline.
pub fn var_iid(panel: &ClusterPanel, theta_hat: f64) -> Result<VarianceReport> {
    let n = panel.n();
    if n < 2 {
        return Err(Error::invalid(
            "iid variance",
            format!("needs at least 2 values, got {n}"),
        ));
    }
    let mut ss = KahanSum::new();
    for cluster in panel.clusters() {
        let mut cs = KahanSum::new();
        for &v in cluster {
            let d = v - theta_hat;
            cs.add(d * d);
        }
        ss.add(cs.value());
    }
    let sigma2 = ss.value() / (n - 1) as f64;
    Ok(VarianceReport::point(
        VarianceMethod::Iid,
        sigma2 / n as f64,
    ))
}

/// Cluster-robust variance from per-cluster sums; see the module notes.
/// With `small_sample_correction` the statistic is scaled by G/(G-1); that
/// refinement is plausible at few clusters but not validated here, so it is
/// off by default.
pub fn var_cluster_robust(
    dataset: &ClusteredDataset,
    panel: &ClusterPanel,
    theta_hat: f64,
    small_sample_correction: bool,
) -> Result<VarianceReport> {
    panel.check_aligned(dataset)?;
    let n = dataset.n() as f64;
    let sums = panel.cluster_sums();
    let mut s_t2 = KahanSum::new();
    for &t in &sums {
        s_t2.add(t * t);
    }
    let mut s_n2 = KahanSum::new();
    for c in dataset.clusters() {
        let ng = c.len() as f64;
        s_n2.add(ng * ng);
    }
    let mut omega = (s_t2.value() - s_n2.value() * theta_hat * theta_hat) / n;
    if small_sample_correction {
        let g = dataset.n_clusters() as f64;
        if g < 2.0 {
            return Err(Error::TooFewClusters {
                needed: 2,
                found: dataset.n_clusters(),
            });
        }
        omega *= g / (g - 1.0);
    }
    let mut report = VarianceReport::point(VarianceMethod::ClusterRobust, omega / n);
    report.omega_hat = Some(omega);
    report.degenerate = !(omega > 0.0);
    Ok(report)
}

/// Symmetric normal-quantile interval around the estimate.
pub fn wald_ci(theta_hat: f64, estimate_variance: f64, level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(
            "interval level",
            format!("{level} outside (0, 1)"),
        ));
    }
    if !(estimate_variance >= 0.0) || !estimate_variance.is_finite() {
        return Err(Error::DegenerateVariance);
    }
    let z = normal_quantile(0.5 + level / 2.0)?;
    let half = z * estimate_variance.sqrt();
    Ok((theta_hat - half, theta_hat + half))
}

/// What the bootstrap recomputes per resample.
#[derive(Clone, Debug)]
pub enum BootstrapTarget<'a> {
    /// Keep nuisance predictions fixed: resampled clusters carry their
    /// original per-cluster contribution sums.
    Fixed {
        kind: EstimatorKind,
        predictions: &'a PredictionPanel,
    },
    /// Refit the nuisances (cross-fit) on each resampled dataset.
    Refit {
        kind: EstimatorKind,
        maps: NuisanceMaps,
        folds: usize,
        clip_epsilon: f64,
        summary: Option<SummaryConfig>,
    },
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub reps: usize,
    pub mode: BootstrapMode,
    pub ci_level: f64,
    pub seed: u64,
    pub threads: usize,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    // Linear interpolation between order statistics.
    let b = sorted.len();
    let h = q * (b - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = h - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    }
}

const MAX_REDRAWS_PER_REP: usize = 10;

fn retryable(err: &Error) -> bool {
    matches!(err, Error::SingleClassLabels | Error::NoObservedOutcomes)
}

/// Nonparametric cluster bootstrap: resample G clusters with replacement,
/// recompute the estimate per the target, and report the variance and a
/// percentile interval of the replicate estimates. Replicates draw from
/// per-replicate substreams, so results do not depend on the thread count.
pub fn cluster_bootstrap(
    dataset: &ClusteredDataset,
    target: &BootstrapTarget,
    config: &BootstrapConfig,
) -> Result<VarianceReport> {
    let g = dataset.n_clusters();
    if g < 2 {
        return Err(Error::TooFewClusters {
            needed: 2,
            found: g,
        });
    }
    if config.reps < 100 {
        return Err(Error::invalid(
            "bootstrap replicates",
            format!("{} is below the minimum of 100", config.reps),
        ));
    }
    if !(config.ci_level > 0.0 && config.ci_level < 1.0) {
        return Err(Error::invalid(
            "interval level",
            format!("{} outside (0, 1)", config.ci_level),
        ));
    }
    let mode = match target {
        BootstrapTarget::Fixed { .. } => BootstrapMode::FixedNuisances,
        BootstrapTarget::Refit { .. } => BootstrapMode::RefitNuisances,
    };
    if mode != config.mode {
        return Err(Error::invalid(
            "bootstrap mode",
            "configured mode does not match the supplied target",
        ));
    }

    // Per-cluster sums for the fixed-nuisance path.
    let fixed: Option<(Vec<f64>, Vec<usize>)> = match target {
        BootstrapTarget::Fixed { kind, predictions } => {
            let contributions = contribution_panel(*kind, dataset, predictions)?;
            Some((contributions.cluster_sums(), dataset.cluster_sizes()))
        }
        BootstrapTarget::Refit { .. } => None,
    };

    let replicate = |b: usize| -> Result<(f64, usize)> {
        let mut rng = stream(config.seed, StreamRole::Bootstrap, &[b as u64]);
        let mut redraws = 0usize;
        loop {
            let draw: Vec<usize> = (0..g).map(|_| rng.random_range(0..g)).collect();
            let attempt: Result<f64> = match target {
                BootstrapTarget::Fixed { .. } => {
                    let (sums, sizes) = fixed.as_ref().unwrap();
                    let mut num = KahanSum::new();
                    let mut den = 0usize;
                    for &j in &draw {
                        num.add(sums[j]);
                        den += sizes[j];
                    }
                    Ok(num.value() / den as f64)
                }
                BootstrapTarget::Refit {
                    kind,
                    maps,
                    folds,
                    clip_epsilon,
                    summary,
                } => (|| {
                    let resampled = dataset.subset(&draw)?;
                    let fit_seed =
                        subseed(config.seed, StreamRole::Bootstrap, &[b as u64, redraws as u64]);
                    let theta = match kind {
                        EstimatorKind::DrSequential => {
                            let cfg = summary.as_ref().ok_or_else(|| {
                                Error::invalid(
                                    "bootstrap target",
                                    "sequential refit needs a summary configuration",
                                )
                            })?;
                            crate::estimators::estimate_dr_sequential(
                                &resampled,
                                cfg,
                                maps,
                                *folds,
                                *clip_epsilon,
                                fit_seed,
                            )?
                            .theta_hat
                        }
                        kind => {
                            let preds =
                                cross_fit(&resampled, *folds, maps, *clip_epsilon, fit_seed)?;
                            contribution_panel(*kind, &resampled, &preds)?.mean()
                        }
                    };
                    if !theta.is_finite() {
                        return Err(Error::NonFiniteEstimate);
                    }
                    Ok(theta)
                })(),
            };
            match attempt {
                Ok(v) => return Ok((v, redraws)),
                Err(e) if retryable(&e) && redraws < MAX_REDRAWS_PER_REP => {
                    redraws += 1;
                }
                Err(e) if retryable(&e) => {
                    return Err(Error::BootstrapExhausted { redraws })
                }
                Err(e) => return Err(e),
            }
        }
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads.max(1))
        .build()
        .map_err(|e| Error::Internal {
            details: format!("thread pool: {e}"),
        })?;
    let results: Vec<Result<(f64, usize)>> =
        pool.install(|| (0..config.reps).into_par_iter().map(replicate).collect());

    let mut thetas = Vec::with_capacity(config.reps);
    let mut total_redraws = 0usize;
    for r in results {
        let (v, redraws) = r?;
        thetas.push(v);
        total_redraws += redraws;
    }

    let b = thetas.len() as f64;
    let mean = {
        let mut acc = KahanSum::new();
        for &v in &thetas {
            acc.add(v);
        }
        acc.value() / b
    };
    let mut ss = KahanSum::new();
    for &v in &thetas {
        let d = v - mean;
        ss.add(d * d);
    }
    let variance = ss.value() / (b - 1.0);

    let mut sorted = thetas;
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = percentile(&sorted, (1.0 - config.ci_level) / 2.0);
    let hi = percentile(&sorted, (1.0 + config.ci_level) / 2.0);

    Ok(VarianceReport {
        method: VarianceMethod::ClusterBootstrap,
        estimate_variance: variance,
        omega_hat: None,
        degenerate: false,
        bootstrap_reps: Some(config.reps),
        bootstrap_mode: Some(mode),
        percentile_ci: Some((lo, hi)),
        redraws: Some(total_redraws),
    })
}
