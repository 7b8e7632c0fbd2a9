//! Scaling diagnostics for the per-individual variance scale. Influence
//! panels are synthesized directly with a chosen within-cluster dependence,
//! the cluster-robust statistic is averaged by brute force over many panels
//! per sample size, and the growth rate is read off a log-log fit.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numeric::{correlation, line_fit, sym_eigen};
use crate::rng::{stream, StreamRole};
use crate::simulation::dgp::cluster_size_plan;
use crate::simulation::experiments::run_parallel;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Within-cluster dependence of the synthesized values. Each member value
/// is standard normal marginally (up to the repair noted on `InverseGap`);
/// the kinds differ only in how members of one cluster covary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaKind {
    /// Independent members; the scale stays constant in n.
    IidWithin,
    /// One shared draw per cluster; the scale grows like n^alpha.
    PerfectCorrelation,
    /// Covariance 1/|t - s| between members; the scale grows like log n.
    InverseGap,
    /// Half the individuals in singletons, half in clusters of size
    /// floor(n^alpha) with one shared draw each; n^alpha growth persists
    /// even though the cluster count is proportional to n.
    Heterogeneous,
}

fn default_alpha() -> f64 {
    0.5
}

/// Grid configuration. An empty `n_grid` or zero `reps` means "use the
/// defaults for the kind" (see `resolved`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OmegaConfig {
    pub kind: OmegaKind,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub n_grid: Vec<usize>,
    #[serde(default)]
    pub reps: usize,
}

impl OmegaConfig {
    /// Grids sized so the Monte Carlo error of the fitted slope is well
    /// under the 0.05 tolerance the diagnostics are judged against.
    pub fn defaults_for(kind: OmegaKind) -> Self {
        let (n_grid, reps) = match kind {
            OmegaKind::IidWithin => (vec![1024, 2048, 4096, 8192, 16384], 300),
            OmegaKind::PerfectCorrelation => (vec![1024, 2048, 4096, 8192, 16384], 200),
            OmegaKind::InverseGap => (vec![256, 512, 1024, 2048, 4096], 300),
            OmegaKind::Heterogeneous => (vec![1024, 2048, 4096, 8192, 16384], 200),
        };
        Self {
            kind,
            alpha: default_alpha(),
            n_grid,
            reps,
        }
    }

    /// Fill an empty grid or zero replication count from the kind defaults.
    pub fn resolved(&self) -> Self {
        let defaults = Self::defaults_for(self.kind);
        Self {
            kind: self.kind,
            alpha: self.alpha,
            n_grid: if self.n_grid.is_empty() {
                defaults.n_grid
            } else {
                self.n_grid.clone()
            },
            reps: if self.reps == 0 {
                defaults.reps
            } else {
                self.reps
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmegaDiagReport {
    pub kind: OmegaKind,
    pub alpha: f64,
    pub n_grid: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    /// Brute-force mean of the statistic at each grid point.
    pub omega_hat: Vec<f64>,
    pub omega_se: Vec<f64>,
    /// Log-log slope; for `InverseGap` the regressor is log log n, so a
    /// value near 1 indicates logarithmic growth.
    pub slope: f64,
    pub slope_se: f64,
    pub intercept: f64,
    /// Correlation between the statistic and log n on the grid.
    pub log_n_correlation: f64,
    /// Set when the inverse-gap covariance needed its negative eigenvalues
    /// clipped to synthesize (it is not positive semidefinite beyond two
    /// members); the clipped version keeps the logarithmic growth.
    pub covariance_clipped: bool,
}

/// Equal-size plan for three kinds; the heterogeneous plan puts about half
/// the individuals in singletons and the rest in blocks of floor(n^alpha).
fn size_plan(kind: OmegaKind, n: usize, alpha: f64) -> Result<Vec<usize>> {
    let m = (n as f64).powf(alpha).floor() as usize;
    if kind == OmegaKind::Heterogeneous {
        if m < 2 {
            return Err(Error::invalid(
                "heterogeneous plan",
                format!("floor(n^{alpha}) = {m} leaves no real clusters at n = {n}"),
            ));
        }
        let big_count = (n / 2) / m;
        if big_count == 0 {
            return Err(Error::invalid(
                "heterogeneous plan",
                format!("n = {n} too small to fit a cluster of size {m} in half the sample"),
            ));
        }
        let singles = n - big_count * m;
        let mut sizes = vec![1; singles];
        sizes.extend(std::iter::repeat(m).take(big_count));
        Ok(sizes)
    } else {
        cluster_size_plan(n, m.max(1))
    }
}

/// Factor L with L L' equal to the inverse-gap covariance after clipping
/// its negative eigenvalues to zero.
struct GapFactor {
    l: Vec<f64>,
    size: usize,
    clipped: bool,
}

fn gap_factor(size: usize) -> GapFactor {
    let mut c = vec![0.0; size * size];
    for i in 0..size {
        for j in 0..size {
            c[i * size + j] = if i == j {
                1.0
            } else {
                1.0 / (i.abs_diff(j) as f64)
            };
        }
    }
    let (values, vectors) = sym_eigen(&c, size);
    let clipped = values.iter().any(|&v| v < -1e-8);
    let mut l = vec![0.0; size * size];
    for k in 0..size {
        let scale = values[k].max(0.0).sqrt();
        for i in 0..size {
            l[i * size + k] = vectors[i * size + k] * scale;
        }
    }
    GapFactor {
        l,
        size,
        clipped,
    }
}

/// Draw one cluster's values into `buf` and return their sum.
fn draw_cluster(
    kind: OmegaKind,
    size: usize,
    factors: &HashMap<usize, GapFactor>,
    rng: &mut ChaCha8Rng,
    buf: &mut Vec<f64>,
) -> f64 {
    buf.clear();
    match kind {
        OmegaKind::IidWithin => {
            for _ in 0..size {
                buf.push(rng.sample::<f64, _>(StandardNormal));
            }
        }
        // Heterogeneous singletons are the size-1 case of a shared draw.
        OmegaKind::PerfectCorrelation | OmegaKind::Heterogeneous => {
            let z: f64 = rng.sample(StandardNormal);
            buf.resize(size, z);
        }
        OmegaKind::InverseGap => {
            let f = &factors[&size];
            debug_assert_eq!(f.size, size);
            let z: Vec<f64> = (0..size)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            for i in 0..size {
                let mut v = 0.0;
                for k in 0..size {
                    v += f.l[i * size + k] * z[k];
                }
                buf.push(v);
            }
        }
    }
    buf.iter().sum()
}

pub fn omega_scaling_diagnostic(
    config: &OmegaConfig,
    seed: u64,
    threads: usize,
) -> Result<OmegaDiagReport> {
    let cfg = config.resolved();
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(Error::invalid(
            "cluster size exponent",
            format!("{} outside (0, 1)", cfg.alpha),
        ));
    }
    if cfg.n_grid.len() < 3 {
        return Err(Error::invalid(
            "n grid",
            "need at least 3 sizes to fit a slope",
        ));
    }
    if cfg.reps < 2 {
        return Err(Error::invalid("replications", "must be at least 2"));
    }

    let mut omega_hat = Vec::with_capacity(cfg.n_grid.len());
    let mut omega_se = Vec::with_capacity(cfg.n_grid.len());
    let mut covariance_clipped = false;
    for (ni, &n) in cfg.n_grid.iter().enumerate() {
        let sizes = size_plan(cfg.kind, n, cfg.alpha)?;
        let mut factors = HashMap::new();
        if cfg.kind == OmegaKind::InverseGap {
            for &s in &sizes {
                factors.entry(s).or_insert_with(|| gap_factor(s));
            }
            covariance_clipped |= factors.values().any(|f| f.clipped);
        }
        let sum_sq_sizes: f64 = sizes.iter().map(|&s| (s * s) as f64).sum();
        let omegas = run_parallel(threads, cfg.reps, |r| {
            let mut rng = stream(seed, StreamRole::PanelSynthesis, &[ni as u64, r as u64]);
            let mut buf = Vec::with_capacity(sizes.last().copied().unwrap_or(1));
            let mut sum_t = 0.0;
            let mut sum_t2 = 0.0;
            for &s in &sizes {
                let t = draw_cluster(cfg.kind, s, &factors, &mut rng, &mut buf);
                sum_t += t;
                sum_t2 += t * t;
            }
            let theta = sum_t / n as f64;
            (sum_t2 - sum_sq_sizes * theta * theta) / n as f64
        })?;
        let m = omegas.len() as f64;
        let mean = omegas.iter().sum::<f64>() / m;
        let var = omegas.iter().map(|&o| (o - mean) * (o - mean)).sum::<f64>() / (m - 1.0);
        omega_hat.push(mean);
        omega_se.push((var / m).sqrt());
    }

    let ln_n: Vec<f64> = cfg.n_grid.iter().map(|&n| (n as f64).ln()).collect();
    let x: Vec<f64> = match cfg.kind {
        OmegaKind::InverseGap => ln_n.iter().map(|v| v.ln()).collect(),
        _ => ln_n.clone(),
    };
    for &o in &omega_hat {
        if !(o > 0.0) {
            return Err(Error::DegenerateVariance);
        }
    }
    let y: Vec<f64> = omega_hat.iter().map(|&o| o.ln()).collect();
    let fit = line_fit(&x, &y)?;
    let log_n_correlation = correlation(&ln_n, &omega_hat)?;

    Ok(OmegaDiagReport {
        kind: cfg.kind,
        alpha: cfg.alpha,
        n_grid: cfg.n_grid,
        reps: cfg.reps,
        seed,
        omega_hat,
        omega_se,
        slope: fit.slope,
        slope_se: fit.slope_se,
        intercept: fit.intercept,
        log_n_correlation,
        covariance_clipped,
    })
}
