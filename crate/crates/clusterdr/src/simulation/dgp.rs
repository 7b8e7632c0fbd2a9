//! Data generating processes for the simulation studies. All three share
//! the pattern: a cluster-level covariate X, member-level covariates W with
//! within-cluster dependence, a missingness indicator drawn from a logistic
//! model, and a Gaussian outcome drawn for every member but stored only
//! when observed (the full draws are returned separately as an oracle
//! panel for calibration checks).

use crate::data::{Cluster, ClusterPanel, ClusteredDataset, IndividualRecord};
use crate::error::{Error, Result};
use crate::nuisance::{logistic, FeatureMap, GlmFit, Link, NuisanceFit};
use crate::rng::{stream, StreamRole};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// A generated dataset, the analytic value of its estimand, and the
/// fully-observed outcome draws aligned to the dataset.
#[derive(Clone, Debug)]
pub struct GeneratedData {
    pub dataset: ClusteredDataset,
    pub truth: f64,
    pub oracle_outcomes: ClusterPanel,
}

/// Equal cluster sizes `m` with the remainder absorbed by the last cluster.
pub fn cluster_size_plan(n: usize, m: usize) -> Result<Vec<usize>> {
    if m < 1 {
        return Err(Error::invalid("cluster size", "must be at least 1"));
    }
    if n < m {
        return Err(Error::invalid(
            "sample size",
            format!("n = {n} is smaller than the cluster size {m}"),
        ));
    }
    let g = n / m;
    let mut sizes = vec![m; g];
    *sizes.last_mut().unwrap() += n - g * m;
    Ok(sizes)
}

fn size_from_alpha(n: usize, alpha: f64) -> Result<usize> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(
            "cluster size exponent",
            format!("{alpha} outside (0, 1)"),
        ));
    }
    let m = (n as f64).powf(alpha).floor() as usize;
    if m < 1 {
        return Err(Error::invalid(
            "cluster size exponent",
            format!("floor(n^{alpha}) < 1 at n = {n}"),
        ));
    }
    Ok(m)
}

/// Test whether the AR(1) recursion parameters are admissible.
fn check_common(sigma2: f64, rho: f64, y_noise_sd: f64) -> Result<()> {
    if !(sigma2 > 0.0) {
        return Err(Error::invalid("sigma2", format!("{sigma2} must be positive")));
    }
    if !(rho > -1.0 && rho < 1.0) {
        return Err(Error::invalid("rho", format!("{rho} outside (-1, 1)")));
    }
    if !(y_noise_sd > 0.0) {
        return Err(Error::invalid(
            "outcome noise sd",
            format!("{y_noise_sd} must be positive"),
        ));
    }
    Ok(())
}

/// Draw an exchangeable-in-law AR(1) path around `x`: each W_i is
/// N(x, sigma2) marginally with Cov(W_i, W_j) = sigma2 rho^|i-j|.
fn ar1_around(
    x: f64,
    len: usize,
    rho: f64,
    sigma: f64,
    rng: &mut ChaCha8Rng,
    mut visit: impl FnMut(usize, f64, &mut ChaCha8Rng),
) {
    let shrink = (1.0 - rho * rho).sqrt();
    let mut prev = 0.0;
    for i in 0..len {
        let e: f64 = rng.sample(StandardNormal);
        let dev = if i == 0 {
            sigma * e
        } else {
            rho * prev + sigma * shrink * e
        };
        prev = dev;
        visit(i, x + dev, rng);
    }
}

/// Linear-index missingness, linear outcome: W centered at X with an
/// autoregressive within-cluster correlation, R from a logistic model in
/// (x, w), and Y Gaussian around a linear mean. Cluster sizes are
/// floor(n^alpha).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HomogeneousDgp {
    pub rho: f64,
    pub sigma2: f64,
    /// Logit coefficients on (x, w); intercept fixed at zero.
    pub pi_coef: [f64; 2],
    /// Outcome mean coefficients (x, w, intercept).
    pub mu_coef: [f64; 3],
    pub y_noise_sd: f64,
    pub alpha: f64,
}

impl Default for HomogeneousDgp {
    fn default() -> Self {
        Self {
            rho: 0.8,
            sigma2: 4.0,
            pi_coef: [1.0, 0.5],
            mu_coef: [-1.0, 1.0, 0.5],
            y_noise_sd: 1.0,
            alpha: 0.4,
        }
    }
}

impl HomogeneousDgp {
    pub fn with_alpha(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::default()
        }
    }

    /// E[mu(X, W)]: X and W are mean zero, so only the intercept survives.
    pub fn theta_true(&self) -> f64 {
        self.mu_coef[2]
    }

    /// The generating models wrapped as a known-coefficient nuisance fit.
    pub fn true_nuisances(&self, clip_epsilon: f64) -> Result<NuisanceFit> {
        NuisanceFit::from_known(
            GlmFit::known(
                Link::Logit,
                FeatureMap::Linear,
                vec![0.0, self.pi_coef[0], self.pi_coef[1]],
            ),
            GlmFit::known(
                Link::Identity,
                FeatureMap::Linear,
                vec![self.mu_coef[2], self.mu_coef[0], self.mu_coef[1]],
            ),
            clip_epsilon,
        )
    }

    fn validate(&self) -> Result<()> {
        check_common(self.sigma2, self.rho, self.y_noise_sd)
    }
}

pub fn gen_homogeneous(spec: &HomogeneousDgp, n: usize, seed: u64) -> Result<GeneratedData> {
    spec.validate()?;
    let sizes = cluster_size_plan(n, size_from_alpha(n, spec.alpha)?)?;
    let sigma = spec.sigma2.sqrt();
    let mut rng = stream(seed, StreamRole::Data, &[]);
    let mut clusters = Vec::with_capacity(sizes.len());
    let mut oracle = Vec::with_capacity(sizes.len());
    for &size in &sizes {
        let x: f64 = rng.sample(StandardNormal);
        let mut members = Vec::with_capacity(size);
        let mut oracle_row = Vec::with_capacity(size);
        ar1_around(x, size, spec.rho, sigma, &mut rng, |i, w, rng| {
            let pi = logistic(spec.pi_coef[0] * x + spec.pi_coef[1] * w);
            let r = rng.random::<f64>() < pi;
            let mean = spec.mu_coef[0] * x + spec.mu_coef[1] * w + spec.mu_coef[2];
            let y = mean + spec.y_noise_sd * rng.sample::<f64, _>(StandardNormal);
            oracle_row.push(y);
            members.push(IndividualRecord {
                w: vec![w],
                r,
                y: r.then_some(y),
                time_index: i,
            });
        });
        oracle.push(oracle_row);
        clusters.push(Cluster { x: vec![x], members });
    }
    Ok(GeneratedData {
        dataset: ClusteredDataset::new(clusters)?,
        truth: spec.theta_true(),
        oracle_outcomes: ClusterPanel::from_values(oracle),
    })
}

/// As the homogeneous process but with the curvature moved into the
/// models: mu(x, w) = -x + w^2 and a logit index x + 0.5 w^2, with a fixed
/// cluster size supplied at generation time. E[W^2] = 1 + sigma2, so the
/// estimand is 1 + sigma2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadraticDgp {
    pub rho: f64,
    pub sigma2: f64,
    pub y_noise_sd: f64,
}

impl Default for QuadraticDgp {
    fn default() -> Self {
        Self {
            rho: 0.8,
            sigma2: 4.0,
            y_noise_sd: 1.0,
        }
    }
}

impl QuadraticDgp {
    pub fn theta_true(&self) -> f64 {
        1.0 + self.sigma2
    }

    /// The generating models over the quadratic feature map (x, w, w^2).
    pub fn true_nuisances(&self, clip_epsilon: f64) -> Result<NuisanceFit> {
        NuisanceFit::from_known(
            GlmFit::known(
                Link::Logit,
                FeatureMap::QuadraticInW,
                vec![0.0, 1.0, 0.0, 0.5],
            ),
            GlmFit::known(
                Link::Identity,
                FeatureMap::QuadraticInW,
                vec![0.0, -1.0, 0.0, 1.0],
            ),
            clip_epsilon,
        )
    }
}

pub fn gen_quadratic(
    spec: &QuadraticDgp,
    n: usize,
    cluster_size: usize,
    seed: u64,
) -> Result<GeneratedData> {
    check_common(spec.sigma2, spec.rho, spec.y_noise_sd)?;
    let sizes = cluster_size_plan(n, cluster_size)?;
    let sigma = spec.sigma2.sqrt();
    let mut rng = stream(seed, StreamRole::Data, &[]);
    let mut clusters = Vec::with_capacity(sizes.len());
    let mut oracle = Vec::with_capacity(sizes.len());
    for &size in &sizes {
        let x: f64 = rng.sample(StandardNormal);
        let mut members = Vec::with_capacity(size);
        let mut oracle_row = Vec::with_capacity(size);
        ar1_around(x, size, spec.rho, sigma, &mut rng, |i, w, rng| {
            let pi = logistic(x + 0.5 * w * w);
            let r = rng.random::<f64>() < pi;
            let y = -x + w * w + spec.y_noise_sd * rng.sample::<f64, _>(StandardNormal);
            oracle_row.push(y);
            members.push(IndividualRecord {
                w: vec![w],
                r,
                y: r.then_some(y),
                time_index: i,
            });
        });
        oracle.push(oracle_row);
        clusters.push(Cluster { x: vec![x], members });
    }
    Ok(GeneratedData {
        dataset: ClusteredDataset::new(clusters)?,
        truth: spec.theta_true(),
        oracle_outcomes: ClusterPanel::from_values(oracle),
    })
}

/// Within-cluster time series: a two-dimensional AR(2) covariate process
/// started at zero, with missingness and outcomes driven by the running
/// history summary (max, min, componentwise mean), so the correct
/// adjustment set is the summary, not the current covariates alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequentialDgp {
    pub a1: [[f64; 2]; 2],
    pub a2: [[f64; 2]; 2],
    /// Innovations are N(0, eps_cov_scale * I).
    pub eps_cov_scale: f64,
    /// Logit coefficients on (x, s_max, s_min, s_mean1, s_mean2).
    pub pi_coef: [f64; 5],
    /// Outcome mean coefficients on the same ordering, then the intercept.
    pub mu_coef: [f64; 6],
    pub y_noise_sd: f64,
    pub alpha: f64,
}

impl Default for SequentialDgp {
    fn default() -> Self {
        Self {
            a1: [[0.5, 0.0], [0.0, 0.5]],
            a2: [[0.2, 0.0], [0.0, 0.2]],
            eps_cov_scale: 4.0,
            pi_coef: [1.0, 1.0, 0.8, -0.5, 0.3],
            mu_coef: [-1.0, 1.0, 1.0, -0.5, -0.4, 1.0],
            y_noise_sd: 1.0,
            alpha: 0.4,
        }
    }
}

fn mat4_mul(a: &[[f64; 4]; 4], b: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            let mut s = 0.0;
            for k in 0..4 {
                s += a[i][k] * b[k][j];
            }
            out[i][j] = s;
        }
    }
    out
}

impl SequentialDgp {
    /// Upper bound on the spectral radius of the AR(2) companion matrix via
    /// ||M^256||_F^(1/256); overestimates the radius by well under 1%, so a
    /// bound below 1 certifies stability.
    pub fn spectral_radius_bound(&self) -> f64 {
        let mut m = [[0.0; 4]; 4];
        for i in 0..2 {
            for j in 0..2 {
                m[i][j] = self.a1[i][j];
                m[i][j + 2] = self.a2[i][j];
            }
            m[i + 2][i] = 1.0;
        }
        for _ in 0..8 {
            m = mat4_mul(&m, &m);
        }
        let fro: f64 = m
            .iter()
            .flat_map(|row| row.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        fro.powf(1.0 / 256.0)
    }

    /// Analytic estimand: the covariate process is mean zero and the max
    /// and min of its history are sign-symmetric, so when their outcome
    /// coefficients are equal the estimand is the intercept. Otherwise no
    /// closed form is available and `None` is returned.
    pub fn psi_true(&self) -> Option<f64> {
        (self.mu_coef[1] == self.mu_coef[2]).then_some(self.mu_coef[5])
    }

    /// The generating models on (x, summary) as known coefficients.
    pub fn true_nuisances(&self, clip_epsilon: f64) -> Result<NuisanceFit> {
        let mut pi = vec![0.0];
        pi.extend_from_slice(&self.pi_coef);
        let mut mu = vec![self.mu_coef[5]];
        mu.extend_from_slice(&self.mu_coef[..5]);
        NuisanceFit::from_known(
            GlmFit::known(Link::Logit, FeatureMap::Linear, pi),
            GlmFit::known(Link::Identity, FeatureMap::Linear, mu),
            clip_epsilon,
        )
    }

    fn validate(&self) -> Result<()> {
        if !(self.eps_cov_scale > 0.0) {
            return Err(Error::invalid(
                "innovation scale",
                format!("{} must be positive", self.eps_cov_scale),
            ));
        }
        if !(self.y_noise_sd > 0.0) {
            return Err(Error::invalid(
                "outcome noise sd",
                format!("{} must be positive", self.y_noise_sd),
            ));
        }
        let bound = self.spectral_radius_bound();
        if !(bound < 1.0) {
            return Err(Error::UnstableTransition);
        }
        Ok(())
    }
}

pub fn gen_sequential(spec: &SequentialDgp, n: usize, seed: u64) -> Result<GeneratedData> {
    spec.validate()?;
    let sizes = cluster_size_plan(n, size_from_alpha(n, spec.alpha)?)?;
    let eps_sd = spec.eps_cov_scale.sqrt();
    let mut rng = stream(seed, StreamRole::Data, &[]);
    let mut clusters = Vec::with_capacity(sizes.len());
    let mut oracle = Vec::with_capacity(sizes.len());
    for &size in &sizes {
        let x: f64 = rng.sample(StandardNormal);
        let mut prev = [0.0; 2];
        let mut prev2 = [0.0; 2];
        let mut s_max = f64::NEG_INFINITY;
        let mut s_min = f64::INFINITY;
        let mut s_sum = [0.0; 2];
        let mut members = Vec::with_capacity(size);
        let mut oracle_row = Vec::with_capacity(size);
        for t in 0..size {
            let mut w = [0.0; 2];
            for k in 0..2 {
                let e: f64 = rng.sample(StandardNormal);
                w[k] = spec.a1[k][0] * prev[0]
                    + spec.a1[k][1] * prev[1]
                    + spec.a2[k][0] * prev2[0]
                    + spec.a2[k][1] * prev2[1]
                    + eps_sd * e;
            }
            prev2 = prev;
            prev = w;
            for &v in &w {
                s_max = s_max.max(v);
                s_min = s_min.min(v);
            }
            s_sum[0] += w[0];
            s_sum[1] += w[1];
            let tt = (t + 1) as f64;
            let s = [s_max, s_min, s_sum[0] / tt, s_sum[1] / tt];
            let logit = spec.pi_coef[0] * x
                + spec.pi_coef[1] * s[0]
                + spec.pi_coef[2] * s[1]
                + spec.pi_coef[3] * s[2]
                + spec.pi_coef[4] * s[3];
            let r = rng.random::<f64>() < logistic(logit);
            let mean = spec.mu_coef[0] * x
                + spec.mu_coef[1] * s[0]
                + spec.mu_coef[2] * s[1]
                + spec.mu_coef[3] * s[2]
                + spec.mu_coef[4] * s[3]
                + spec.mu_coef[5];
            let y = mean + spec.y_noise_sd * rng.sample::<f64, _>(StandardNormal);
            oracle_row.push(y);
            members.push(IndividualRecord {
                w: w.to_vec(),
                r,
                y: r.then_some(y),
                time_index: t,
            });
        }
        oracle.push(oracle_row);
        clusters.push(Cluster { x: vec![x], members });
    }
    let truth = spec.psi_true().ok_or_else(|| {
        Error::invalid(
            "sequential estimand",
            "no closed form unless the max and min outcome coefficients agree",
        )
    })?;
    Ok(GeneratedData {
        dataset: ClusteredDataset::new(clusters)?,
        truth,
        oracle_outcomes: ClusterPanel::from_values(oracle),
    })
}
