//! Core data model: clustered observations with cluster-level covariates,
//! member-level covariates, and possibly missing outcomes, plus the aligned
//! per-individual value panels that estimators produce.

use crate::error::{Error, Result};
use crate::numeric::KahanSum;
use crate::rng::{stream, StreamRole};
use rand::seq::SliceRandom;

/// One individual inside a cluster. `y` must be present exactly when
/// `r` marks the outcome as observed; `w` can hold the raw covariates or a
/// history summary, depending on the pipeline stage.
#[derive(Clone, Debug, PartialEq)]
pub struct IndividualRecord {
    pub w: Vec<f64>,
    pub r: bool,
    pub y: Option<f64>,
    /// Position within the cluster, 0-based and contiguous in storage order.
    pub time_index: usize,
}

impl IndividualRecord {
    pub fn observed(w: Vec<f64>, y: f64, time_index: usize) -> Self {
        Self {
            w,
            r: true,
            y: Some(y),
            time_index,
        }
    }

    pub fn missing(w: Vec<f64>, time_index: usize) -> Self {
        Self {
            w,
            r: false,
            y: None,
            time_index,
        }
    }
}

/// A cluster: shared covariates `x` and at least one member.
#[derive(Clone, Debug, PartialEq)]
pub struct Cluster {
    pub x: Vec<f64>,
    pub members: Vec<IndividualRecord>,
}

impl Cluster {
    /// Build a cluster from rows in time order, assigning indices 0..len.
    pub fn from_rows(x: Vec<f64>, rows: Vec<(Vec<f64>, Option<f64>)>) -> Self {
        let members = rows
            .into_iter()
            .enumerate()
            .map(|(t, (w, y))| IndividualRecord {
                w,
                r: y.is_some(),
                y,
                time_index: t,
            })
            .collect();
        Self { x, members }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Validate a cluster collection: non-empty clusters, consistent covariate
/// dimensions, outcomes present exactly for observed members, contiguous
/// 0-based time indices, and finite covariates and outcomes.
pub fn validate_clusters(clusters: &[Cluster]) -> Result<()> {
    if clusters.is_empty() {
        return Err(Error::TooFewClusters {
            needed: 1,
            found: 0,
        });
    }
    let x_dim = clusters[0].x.len();
    let w_dim = clusters[0]
        .members
        .first()
        .map(|m| m.w.len())
        .unwrap_or(0);
    for (g, cluster) in clusters.iter().enumerate() {
        if cluster.members.is_empty() {
            return Err(Error::EmptyCluster { cluster: g });
        }
        if cluster.x.len() != x_dim {
            return Err(Error::ClusterCovariateDim {
                cluster: g,
                found: cluster.x.len(),
                expected: x_dim,
            });
        }
        for (k, v) in cluster.x.iter().enumerate() {
            if !v.is_finite() {
                let _ = k;
                return Err(Error::NonFiniteField {
                    cluster: g,
                    member: 0,
                    what: "cluster covariate",
                });
            }
        }
        for (i, m) in cluster.members.iter().enumerate() {
            if m.w.len() != w_dim {
                return Err(Error::MemberCovariateDim {
                    cluster: g,
                    member: i,
                    found: m.w.len(),
                    expected: w_dim,
                });
            }
            if m.time_index != i {
                return Err(Error::TimeIndexInvalid { cluster: g });
            }
            if m.w.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteField {
                    cluster: g,
                    member: i,
                    what: "member covariate",
                });
            }
            match (m.r, m.y) {
                (false, Some(_)) => {
                    return Err(Error::OutcomePresentButMissing {
                        cluster: g,
                        member: i,
                    })
                }
                (true, None) => {
                    return Err(Error::OutcomeAbsentButObserved {
                        cluster: g,
                        member: i,
                    })
                }
                (true, Some(y)) if !y.is_finite() => {
                    return Err(Error::NonFiniteField {
                        cluster: g,
                        member: i,
                        what: "outcome",
                    })
                }
                _ => {}
            }
        }
    }
    Ok(())
}

/// An immutable, validated collection of clusters. Construction runs the
/// full validation, so holding a value of this type certifies the invariants.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusteredDataset {
    clusters: Vec<Cluster>,
    n: usize,
}

impl ClusteredDataset {
    pub fn new(clusters: Vec<Cluster>) -> Result<Self> {
        validate_clusters(&clusters)?;
        let n = clusters.iter().map(Cluster::len).sum();
        Ok(Self { clusters, n })
    }

    /// Re-run validation; always succeeds on a constructed dataset.
    pub fn validate(&self) -> Result<()> {
        validate_clusters(&self.clusters)
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    /// Total number of individuals across clusters.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        self.clusters.iter().map(Cluster::len).collect()
    }

    pub fn x_dim(&self) -> usize {
        self.clusters[0].x.len()
    }

    pub fn w_dim(&self) -> usize {
        self.clusters[0].members[0].w.len()
    }

    /// Count of members with observed outcomes.
    pub fn n_observed(&self) -> usize {
        self.clusters
            .iter()
            .map(|c| c.members.iter().filter(|m| m.r).count())
            .sum()
    }

    /// New dataset holding the given clusters (by index) in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut clusters = Vec::with_capacity(indices.len());
        for &g in indices {
            let c = self
                .clusters
                .get(g)
                .ok_or(Error::ClusterIndexOutOfRange {
                    index: g,
                    len: self.clusters.len(),
                })?;
            clusters.push(c.clone());
        }
        ClusteredDataset::new(clusters)
    }
}

/// Randomly split cluster indices into two disjoint sets covering all
/// clusters; the first receives round(fraction * G) clusters. Both sets are
/// returned sorted. Deterministic in (G, fraction, seed).
pub fn split_clusters(
    dataset: &ClusteredDataset,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let g = dataset.n_clusters();
    if g < 2 {
        return Err(Error::TooFewClusters {
            needed: 2,
            found: g,
        });
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(
            "split fraction",
            format!("{fraction} outside (0, 1)"),
        ));
    }
    let k = (fraction * g as f64).round() as usize;
    let mut indices: Vec<usize> = (0..g).collect();
    let mut rng = stream(seed, StreamRole::ClusterSplit, &[]);
    indices.shuffle(&mut rng);
    let mut first: Vec<usize> = indices[..k].to_vec();
    let mut second: Vec<usize> = indices[k..].to_vec();
    first.sort_unstable();
    second.sort_unstable();
    Ok((first, second))
}

/// Per-individual values aligned to a dataset, stored cluster by cluster.
/// Used for influence contributions, predictions, and oracle outcome draws.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterPanel {
    values: Vec<Vec<f64>>,
}

impl ClusterPanel {
    pub fn from_values(values: Vec<Vec<f64>>) -> Self {
        Self { values }
    }

    pub fn zeros_like(dataset: &ClusteredDataset) -> Self {
        Self {
            values: dataset
                .clusters()
                .iter()
                .map(|c| vec![0.0; c.len()])
                .collect(),
        }
    }

    pub fn clusters(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn get(&self, cluster: usize, member: usize) -> f64 {
        self.values[cluster][member]
    }

    pub fn set(&mut self, cluster: usize, member: usize, v: f64) {
        self.values[cluster][member] = v;
    }

    pub fn n(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    /// Check the panel mirrors the dataset's cluster sizes.
    pub fn check_aligned(&self, dataset: &ClusteredDataset) -> Result<()> {
        if self.values.len() != dataset.n_clusters() {
            return Err(Error::PanelMisaligned {
                cluster: self.values.len().min(dataset.n_clusters()),
                found: self.values.len(),
                expected: dataset.n_clusters(),
            });
        }
        for (g, (vals, cluster)) in self.values.iter().zip(dataset.clusters()).enumerate() {
            if vals.len() != cluster.len() {
                return Err(Error::PanelMisaligned {
                    cluster: g,
                    found: vals.len(),
                    expected: cluster.len(),
                });
            }
        }
        Ok(())
    }

    /// Per-cluster sums, compensated, in cluster order.
    pub fn cluster_sums(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|vals| {
                let mut acc = KahanSum::new();
                for &v in vals {
                    acc.add(v);
                }
                acc.value()
            })
            .collect()
    }

    /// Grand mean: per-cluster compensated sums reduced in cluster order.
    pub fn mean(&self) -> f64 {
        let mut acc = KahanSum::new();
        for s in self.cluster_sums() {
            acc.add(s);
        }
        acc.value() / self.n() as f64
    }
}
