//! Point estimators for the average outcome under cluster-correlated data
//! with outcomes missing at random given covariates: the outcome-regression
//! plug-in, inverse propensity weighting, the doubly robust combination of
//! both, and a sequential variant that conditions on within-cluster history
//! summaries.

use crate::data::{Cluster, ClusterPanel, ClusteredDataset, IndividualRecord};
use crate::error::{Error, Result};
use crate::nuisance::{cross_fit, NuisanceMaps, PredictionPanel};
use crate::numeric::KahanSum;
use crate::variance::{wald_ci, VarianceMethod, VarianceReport};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Plugin,
    Ipw,
    Dr,
    DrSequential,
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            EstimatorKind::Plugin => "plugin",
            EstimatorKind::Ipw => "ipw",
            EstimatorKind::Dr => "dr",
            EstimatorKind::DrSequential => "dr_sequential",
        };
        f.write_str(s)
    }
}

/// A point estimate with optional attached variance and interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimator: EstimatorKind,
    pub theta_hat: f64,
    pub n: usize,
    pub n_clusters: usize,
    pub variance_method: VarianceMethod,
    pub variance: Option<f64>,
    pub ci_level: f64,
    pub ci: Option<(f64, f64)>,
    pub degenerate_variance: bool,
}

impl EstimateReport {
    fn point(estimator: EstimatorKind, theta_hat: f64, dataset: &ClusteredDataset) -> Self {
        Self {
            estimator,
            theta_hat,
            n: dataset.n(),
            n_clusters: dataset.n_clusters(),
            variance_method: VarianceMethod::None,
            variance: None,
            ci_level: 0.95,
            ci: None,
            degenerate_variance: false,
        }
    }

    /// Attach a variance report: records the method, and builds the interval
    /// (percentile when the report carries one, Wald otherwise) unless the
    /// variance is degenerate, in which case no interval is produced.
    pub fn attach_variance(&mut self, vr: &VarianceReport, ci_level: f64) -> Result<()> {
        self.variance_method = vr.method;
        self.variance = Some(vr.estimate_variance);
        self.degenerate_variance = vr.degenerate;
        self.ci_level = ci_level;
        self.ci = if vr.degenerate {
            None
        } else if let Some(pci) = vr.percentile_ci {
            Some(pci)
        } else {
            Some(wald_ci(self.theta_hat, vr.estimate_variance, ci_level)?)
        };
        Ok(())
    }
}

/// Per-individual contribution whose grand mean is the point estimate of
/// the given kind. For the doubly robust estimators this is the estimated
/// influence-style value r (y - mu) / pi + mu; missing members contribute mu.
pub fn contribution_panel(
    kind: EstimatorKind,
    dataset: &ClusteredDataset,
    predictions: &PredictionPanel,
) -> Result<ClusterPanel> {
    predictions.check_aligned(dataset)?;
    let mut panel = ClusterPanel::zeros_like(dataset);
    for (g, cluster) in dataset.clusters().iter().enumerate() {
        for (i, m) in cluster.members.iter().enumerate() {
            let mu = predictions.mu_hat.get(g, i);
            let pi = predictions.pi_hat.get(g, i);
            let value = match kind {
                EstimatorKind::Plugin => mu,
                EstimatorKind::Ipw => {
                    if m.r {
                        if !(pi > 0.0) {
                            return Err(Error::NonPositivePropensity { value: pi });
                        }
                        m.y.unwrap() / pi
                    } else {
                        0.0
                    }
                }
                EstimatorKind::Dr | EstimatorKind::DrSequential => {
                    if m.r {
                        if !(pi > 0.0) {
                            return Err(Error::NonPositivePropensity { value: pi });
                        }
                        mu + (m.y.unwrap() - mu) / pi
                    } else {
                        mu
                    }
                }
            };
            if !value.is_finite() {
                return Err(Error::NonFiniteEstimate);
            }
            panel.set(g, i, value);
        }
    }
    Ok(panel)
}

/// Estimated influence-style values for the doubly robust estimator.
pub fn influence_values(
    dataset: &ClusteredDataset,
    predictions: &PredictionPanel,
) -> Result<ClusterPanel> {
    contribution_panel(EstimatorKind::Dr, dataset, predictions)
}

fn estimate(
    kind: EstimatorKind,
    dataset: &ClusteredDataset,
    predictions: &PredictionPanel,
) -> Result<EstimateReport> {
    let panel = contribution_panel(kind, dataset, predictions)?;
    let theta_hat = panel.mean();
    if !theta_hat.is_finite() {
        return Err(Error::NonFiniteEstimate);
    }
    Ok(EstimateReport::point(kind, theta_hat, dataset))
}

/// Mean of the outcome-regression predictions over every individual.
pub fn estimate_plugin(
    dataset: &ClusteredDataset,
    predictions: &PredictionPanel,
) -> Result<EstimateReport> {
    estimate(EstimatorKind::Plugin, dataset, predictions)
}

/// Mean of r y / pi over every individual (zero when missing).
pub fn estimate_ipw(
    dataset: &ClusteredDataset,
    predictions: &PredictionPanel,
) -> Result<EstimateReport> {
    estimate(EstimatorKind::Ipw, dataset, predictions)
}

/// Doubly robust estimate: mean of the influence-style values.
pub fn estimate_dr(
    dataset: &ClusteredDataset,
    predictions: &PredictionPanel,
) -> Result<EstimateReport> {
    estimate(EstimatorKind::Dr, dataset, predictions)
}

/// Mean of the observed outcomes only; the no-adjustment baseline.
pub fn observed_mean(dataset: &ClusteredDataset) -> Result<f64> {
    let mut sum = KahanSum::new();
    let mut count = 0usize;
    for cluster in dataset.clusters() {
        let mut cs = KahanSum::new();
        for m in &cluster.members {
            if let Some(y) = m.y {
                cs.add(y);
                count += 1;
            }
        }
        sum.add(cs.value());
    }
    if count == 0 {
        return Err(Error::NoObservedOutcomes);
    }
    Ok(sum.value() / count as f64)
}

/// Which pieces of the within-cluster history enter the summary, in output
/// order: running max, running min, componentwise running mean, a window of
/// the last `window_d` covariate vectors (zero-padded at the start), and
/// the past missingness/outcome means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SummaryConfig {
    pub running_max: bool,
    pub running_min: bool,
    pub running_mean: bool,
    pub last_d_window: bool,
    pub window_d: usize,
    pub include_past_ry: bool,
}

impl Default for SummaryConfig {
    fn default() -> Self {
        Self::max_min_mean()
    }
}

impl SummaryConfig {
    /// Running max, min, and componentwise mean of the covariate history.
    pub fn max_min_mean() -> Self {
        Self {
            running_max: true,
            running_min: true,
            running_mean: true,
            last_d_window: false,
            window_d: 1,
            include_past_ry: false,
        }
    }

    /// Only the current covariate vector (a window of length one); with
    /// this choice the sequential estimator reduces to the plain one.
    pub fn current_only() -> Self {
        Self {
            running_max: false,
            running_min: false,
            running_mean: false,
            last_d_window: true,
            window_d: 1,
            include_past_ry: false,
        }
    }

    pub fn output_dim(&self, w_dim: usize) -> usize {
        let mut d = 0;
        if self.running_max {
            d += 1;
        }
        if self.running_min {
            d += 1;
        }
        if self.running_mean {
            d += w_dim;
        }
        if self.last_d_window {
            d += self.window_d * w_dim;
        }
        if self.include_past_ry {
            d += 2;
        }
        d
    }

    fn validate(&self, w_dim: usize) -> Result<()> {
        if self.last_d_window && self.window_d == 0 {
            return Err(Error::invalid("summary window", "window_d must be at least 1"));
        }
        if self.output_dim(w_dim) == 0 {
            return Err(Error::invalid(
                "summary components",
                "no components selected",
            ));
        }
        Ok(())
    }
}

/// Summary of the history of cluster members 1..=t (t is 1-based), a
/// fixed-dimension function of a growing history. Depends only on members
/// up to t, never on later ones.
pub fn summarize_history(cluster: &Cluster, t: usize, config: &SummaryConfig) -> Result<Vec<f64>> {
    if cluster.members.is_empty() {
        return Err(Error::EmptyCluster { cluster: 0 });
    }
    let w_dim = cluster.members[0].w.len();
    config.validate(w_dim)?;
    if t < 1 || t > cluster.members.len() {
        return Err(Error::invalid(
            "summary time",
            format!("t = {t} outside 1..={}", cluster.members.len()),
        ));
    }
    let mut out = Vec::with_capacity(config.output_dim(w_dim));
    let history = &cluster.members[..t];
    if config.running_max {
        let mut m = f64::NEG_INFINITY;
        for rec in history {
            for &v in &rec.w {
                m = m.max(v);
            }
        }
        out.push(m);
    }
    if config.running_min {
        let mut m = f64::INFINITY;
        for rec in history {
            for &v in &rec.w {
                m = m.min(v);
            }
        }
        out.push(m);
    }
    if config.running_mean {
        for k in 0..w_dim {
            let mut acc = KahanSum::new();
            for rec in history {
                acc.add(rec.w[k]);
            }
            out.push(acc.value() / t as f64);
        }
    }
    if config.last_d_window {
        // Positions t - d + 1 ..= t (1-based), oldest first, zero-padded
        // before the start of the cluster.
        for j in 0..config.window_d {
            let s = t as i64 - config.window_d as i64 + 1 + j as i64;
            if s >= 1 {
                out.extend_from_slice(&cluster.members[(s - 1) as usize].w);
            } else {
                out.extend(std::iter::repeat(0.0).take(w_dim));
            }
        }
    }
    if config.include_past_ry {
        // Means over strictly earlier members; zeros when t = 1.
        let past = &cluster.members[..t - 1];
        if past.is_empty() {
            out.push(0.0);
            out.push(0.0);
        } else {
            let mut r_acc = KahanSum::new();
            let mut ry_acc = KahanSum::new();
            for rec in past {
                r_acc.add(if rec.r { 1.0 } else { 0.0 });
                ry_acc.add(rec.y.unwrap_or(0.0));
            }
            out.push(r_acc.value() / past.len() as f64);
            out.push(ry_acc.value() / past.len() as f64);
        }
    }
    Ok(out)
}

/// Replace each member's covariates with its history summary, preserving
/// outcomes, missingness, and time order.
pub fn summarized_dataset(
    dataset: &ClusteredDataset,
    config: &SummaryConfig,
) -> Result<ClusteredDataset> {
    let mut clusters = Vec::with_capacity(dataset.n_clusters());
    for cluster in dataset.clusters() {
        let mut members = Vec::with_capacity(cluster.len());
        for (i, m) in cluster.members.iter().enumerate() {
            let s = summarize_history(cluster, i + 1, config)?;
            members.push(IndividualRecord {
                w: s,
                r: m.r,
                y: m.y,
                time_index: m.time_index,
            });
        }
        clusters.push(Cluster {
            x: cluster.x.clone(),
            members,
        });
    }
    ClusteredDataset::new(clusters)
}

/// The summarized dataset, its cross-fit predictions, and the resulting
/// doubly robust estimate; exposed so variance estimation can reuse the
/// intermediate panels.
#[derive(Clone, Debug)]
pub struct SequentialFit {
    pub summarized: ClusteredDataset,
    pub predictions: PredictionPanel,
    pub report: EstimateReport,
}

/// Doubly robust estimation against history summaries: summarize, cross-fit
/// the nuisances on (x, summary), and average the influence-style values.
pub fn estimate_dr_sequential_detail(
    dataset: &ClusteredDataset,
    summary: &SummaryConfig,
    maps: &NuisanceMaps,
    folds: usize,
    clip_epsilon: f64,
    seed: u64,
) -> Result<SequentialFit> {
    let summarized = summarized_dataset(dataset, summary)?;
    let predictions = cross_fit(&summarized, folds, maps, clip_epsilon, seed)?;
    let mut report = estimate(EstimatorKind::Dr, &summarized, &predictions)?;
    report.estimator = EstimatorKind::DrSequential;
    Ok(SequentialFit {
        summarized,
        predictions,
        report,
    })
}

pub fn estimate_dr_sequential(
    dataset: &ClusteredDataset,
    summary: &SummaryConfig,
    maps: &NuisanceMaps,
    folds: usize,
    clip_epsilon: f64,
    seed: u64,
) -> Result<EstimateReport> {
    Ok(estimate_dr_sequential_detail(dataset, summary, maps, folds, clip_epsilon, seed)?.report)
}
