//! Nuisance model estimation: a propensity model for the missingness
//! indicator and an outcome regression, both generalized linear models over
//! configurable feature maps, fitted per training cluster set and applied
//! out of fold. Logistic fits use iteratively reweighted least squares with
//! a small ridge penalty; the outcome model is (ridge) least squares.

use crate::data::{ClusterPanel, ClusteredDataset};
use crate::error::{Error, Result};
use crate::numeric::{solve_spd_jittered, try_solve_spd, KahanSum, Matrix};
use crate::rng::{stream, StreamRole};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Feature construction from (cluster covariates x, member covariates or
/// history summary v). Pure and of fixed output dimension for fixed input
/// dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureMap {
    /// (x, v) concatenated.
    Linear,
    /// (x, v, v squared componentwise).
    QuadraticInW,
    /// Identity over (x, v) where v is already a history summary; alias of
    /// `Linear` kept so configurations state their intent.
    HistorySummary,
    /// Extension point; evaluating it is an error until an implementation
    /// is registered in code.
    Custom { name: String },
}

impl FeatureMap {
    pub fn output_dim(&self, x_dim: usize, v_dim: usize) -> Result<usize> {
        match self {
            FeatureMap::Linear | FeatureMap::HistorySummary => Ok(x_dim + v_dim),
            FeatureMap::QuadraticInW => Ok(x_dim + 2 * v_dim),
            FeatureMap::Custom { name } => {
                Err(Error::UnsupportedFeatureMap { name: name.clone() })
            }
        }
    }

    pub fn build(&self, x: &[f64], v: &[f64], out: &mut Vec<f64>) -> Result<()> {
        out.clear();
        match self {
            FeatureMap::Linear | FeatureMap::HistorySummary => {
                out.extend_from_slice(x);
                out.extend_from_slice(v);
            }
            FeatureMap::QuadraticInW => {
                out.extend_from_slice(x);
                out.extend_from_slice(v);
                out.extend(v.iter().map(|w| w * w));
            }
            FeatureMap::Custom { name } => {
                return Err(Error::UnsupportedFeatureMap { name: name.clone() })
            }
        }
        Ok(())
    }
}

/// Link for a fitted generalized linear model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Logit,
    Identity,
}

/// A fitted (or externally supplied) generalized linear model. Coefficients
/// are (intercept, features...). `training_clusters` is empty for known
/// coefficient models.
#[derive(Clone, Debug, PartialEq)]
pub struct GlmFit {
    pub link: Link,
    pub feature_map: FeatureMap,
    pub coefficients: Vec<f64>,
    pub training_clusters: Vec<usize>,
    pub converged: bool,
    pub ridge_jitter: bool,
}

impl GlmFit {
    /// Wrap known coefficients, e.g. the true model in oracle experiments.
    pub fn known(link: Link, feature_map: FeatureMap, coefficients: Vec<f64>) -> Self {
        Self {
            link,
            feature_map,
            coefficients,
            training_clusters: Vec::new(),
            converged: true,
            ridge_jitter: false,
        }
    }

    fn linear_predictor(&self, features: &[f64]) -> Result<f64> {
        if self.coefficients.len() != features.len() + 1 {
            return Err(Error::CoefficientLength {
                found: self.coefficients.len(),
                expected: features.len() + 1,
            });
        }
        let mut eta = self.coefficients[0];
        for (b, f) in self.coefficients[1..].iter().zip(features) {
            eta += b * f;
        }
        Ok(eta)
    }

    fn respond(&self, eta: f64) -> f64 {
        match self.link {
            Link::Logit => logistic(eta),
            Link::Identity => eta,
        }
    }
}

pub fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(eta)) without overflow.
fn softplus(eta: f64) -> f64 {
    eta.max(0.0) + (-eta.abs()).exp().ln_1p()
}

/// Controls for the logistic solver. The penalty applies to every
/// coefficient uniformly; at the default magnitude it only regularizes
/// separable or collinear designs.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub ridge: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-8,
            ridge: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LogisticFit {
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub grad_max_norm: f64,
}

fn check_design(features: &Matrix, responses: &[f64], what: &'static str) -> Result<()> {
    if features.rows() != responses.len() {
        return Err(Error::DesignResponseMismatch {
            rows: features.rows(),
            labels: responses.len(),
        });
    }
    if !features.is_finite() {
        return Err(Error::NonFiniteInput { what });
    }
    if responses.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput { what: "responses" });
    }
    Ok(())
}

/// Maximize the ridge-penalized Bernoulli log-likelihood by iteratively
/// reweighted least squares with step halving. An intercept column is
/// prepended internally. Separable data yields a flagged, finite fit.
pub fn fit_logistic(
    features: &Matrix,
    labels: &[f64],
    config: &LogisticConfig,
) -> Result<LogisticFit> {
    check_design(features, labels, "design matrix")?;
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::NonBinaryLabels);
    }
    let ones = labels.iter().filter(|&&y| y == 1.0).count();
    if ones == 0 || ones == labels.len() {
        return Err(Error::SingleClassLabels);
    }
    let n = features.rows();
    let p = features.cols() + 1;
    if n < p {
        return Err(Error::TooFewRows {
            needed: p,
            rows: n,
            cols: p,
        });
    }
    if !(config.tol > 0.0) || !(config.ridge >= 0.0) || config.max_iter == 0 {
        return Err(Error::invalid(
            "logistic config",
            format!("{config:?} has a non-positive tolerance, negative ridge, or zero iterations"),
        ));
    }

    let row = |i: usize, out: &mut Vec<f64>| {
        out.clear();
        out.push(1.0);
        out.extend_from_slice(features.row(i));
    };

    let penalized_ll = |beta: &[f64], xi: &mut Vec<f64>| -> f64 {
        let mut ll = KahanSum::new();
        for i in 0..n {
            row(i, xi);
            let eta: f64 = beta.iter().zip(xi.iter()).map(|(b, x)| b * x).sum();
            ll.add(labels[i] * eta - softplus(eta));
        }
        let pen: f64 = beta.iter().map(|b| b * b).sum();
        ll.value() - 0.5 * config.ridge * pen
    };

    let mut beta = vec![0.0; p];
    let mut xi: Vec<f64> = Vec::with_capacity(p);
    let mut ll = penalized_ll(&beta, &mut xi);
    let mut grad = vec![0.0; p];
    let mut hess = vec![0.0; p * p];
    let mut converged = false;
    let mut iterations = 0;
    let mut grad_max = f64::INFINITY;

    for iter in 1..=config.max_iter {
        iterations = iter;
        grad.iter_mut().for_each(|g| *g = 0.0);
        hess.iter_mut().for_each(|h| *h = 0.0);
        for i in 0..n {
            row(i, &mut xi);
            let eta: f64 = beta.iter().zip(xi.iter()).map(|(b, x)| b * x).sum();
            let mu = logistic(eta);
            let resid = labels[i] - mu;
            let wt = (mu * (1.0 - mu)).max(1e-10);
            for a in 0..p {
                grad[a] += xi[a] * resid;
                for b in a..p {
                    hess[a * p + b] += wt * xi[a] * xi[b];
                }
            }
        }
        for a in 0..p {
            grad[a] -= config.ridge * beta[a];
            hess[a * p + a] += config.ridge;
            for b in 0..a {
                hess[a * p + b] = hess[b * p + a];
            }
        }
        grad_max = grad.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
        if grad_max <= config.tol {
            converged = true;
            iterations = iter - 1;
            break;
        }
        let delta = solve_spd_jittered(&hess, p, &grad)?;
        // Step halving keeps the penalized likelihood non-decreasing.
        let mut scale = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let cand: Vec<f64> = beta
                .iter()
                .zip(&delta)
                .map(|(b, d)| b + scale * d)
                .collect();
            let cand_ll = penalized_ll(&cand, &mut xi);
            if cand_ll.is_finite() && cand_ll >= ll - 1e-12 {
                beta = cand;
                ll = cand_ll;
                improved = true;
                break;
            }
            scale *= 0.5;
        }
        if !improved {
            break;
        }
    }

    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::Internal {
            details: "logistic solver produced non-finite coefficients".into(),
        });
    }
    Ok(LogisticFit {
        coefficients: beta,
        converged,
        iterations,
        grad_max_norm: grad_max,
    })
}

#[derive(Clone, Debug)]
pub struct OlsFit {
    pub coefficients: Vec<f64>,
    pub ridge_jitter: bool,
}

/// Least squares with an optional ridge penalty via the normal equations.
/// A rank-deficient design with ridge = 0 falls back to a 1e-8 diagonal
/// jitter and flags the fit.
pub fn fit_ols(features: &Matrix, targets: &[f64], ridge: f64) -> Result<OlsFit> {
    check_design(features, targets, "design matrix")?;
    if !(ridge >= 0.0) {
        return Err(Error::invalid("ols ridge", format!("{ridge} is negative")));
    }
    let n = features.rows();
    if n == 0 {
        return Err(Error::NoObservedOutcomes);
    }
    let p = features.cols() + 1;
    let mut xtx = vec![0.0; p * p];
    let mut xty = vec![0.0; p];
    let mut xi: Vec<f64> = Vec::with_capacity(p);
    for i in 0..n {
        xi.clear();
        xi.push(1.0);
        xi.extend_from_slice(features.row(i));
        for a in 0..p {
            xty[a] += xi[a] * targets[i];
            for b in a..p {
                xtx[a * p + b] += xi[a] * xi[b];
            }
        }
    }
    for a in 0..p {
        xtx[a * p + a] += ridge;
        for b in 0..a {
            xtx[a * p + b] = xtx[b * p + a];
        }
    }
    if let Some(x) = try_solve_spd(&xtx, p, &xty) {
        return Ok(OlsFit {
            coefficients: x,
            ridge_jitter: false,
        });
    }
    let mut jittered = xtx.clone();
    for a in 0..p {
        jittered[a * p + a] += 1e-8;
    }
    match try_solve_spd(&jittered, p, &xty) {
        Some(x) => Ok(OlsFit {
            coefficients: x,
            ridge_jitter: true,
        }),
        None => Err(Error::SingularSystem),
    }
}

/// Feature maps for the two nuisance models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuisanceMaps {
    pub propensity: FeatureMap,
    pub outcome: FeatureMap,
}

impl NuisanceMaps {
    pub fn linear() -> Self {
        Self {
            propensity: FeatureMap::Linear,
            outcome: FeatureMap::Linear,
        }
    }

    pub fn quadratic() -> Self {
        Self {
            propensity: FeatureMap::QuadraticInW,
            outcome: FeatureMap::QuadraticInW,
        }
    }
}

/// The fitted pair (propensity model, outcome model) plus the clipping
/// floor applied to predicted propensities.
#[derive(Clone, Debug, PartialEq)]
pub struct NuisanceFit {
    pub propensity: GlmFit,
    pub outcome: GlmFit,
    pub clip_epsilon: f64,
}

/// Point predictions for one individual: the clipped propensity and the
/// outcome regression value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub pi_hat: f64,
    pub mu_hat: f64,
}

fn check_clip(clip_epsilon: f64) -> Result<()> {
    if !(clip_epsilon > 0.0 && clip_epsilon < 0.5) {
        return Err(Error::invalid(
            "clip epsilon",
            format!("{clip_epsilon} outside (0, 0.5)"),
        ));
    }
    Ok(())
}

impl NuisanceFit {
    /// Assemble a known-nuisance fit (oracle mode); coefficient lengths are
    /// checked at prediction time against the data dimensions.
    pub fn from_known(propensity: GlmFit, outcome: GlmFit, clip_epsilon: f64) -> Result<Self> {
        check_clip(clip_epsilon)?;
        Ok(Self {
            propensity,
            outcome,
            clip_epsilon,
        })
    }

    /// Predict for one individual with cluster covariates `x` and member
    /// covariates (or history summary) `v`.
    pub fn predict(&self, x: &[f64], v: &[f64]) -> Result<Prediction> {
        let mut feats = Vec::new();
        self.propensity.feature_map.build(x, v, &mut feats)?;
        let eta_pi = self.propensity.linear_predictor(&feats)?;
        let pi_raw = self.propensity.respond(eta_pi);
        let pi_hat = pi_raw.clamp(self.clip_epsilon, 1.0);
        self.outcome.feature_map.build(x, v, &mut feats)?;
        let eta_mu = self.outcome.linear_predictor(&feats)?;
        let mu_hat = self.outcome.respond(eta_mu);
        if !pi_hat.is_finite() || !mu_hat.is_finite() {
            return Err(Error::NonFiniteInput {
                what: "nuisance prediction",
            });
        }
        Ok(Prediction { pi_hat, mu_hat })
    }
}

/// Fit both nuisance models on the given training clusters: the propensity
/// model on every member's missingness indicator, the outcome model on
/// observed members only.
pub fn fit_nuisances(
    dataset: &ClusteredDataset,
    training_clusters: &[usize],
    maps: &NuisanceMaps,
    clip_epsilon: f64,
) -> Result<NuisanceFit> {
    check_clip(clip_epsilon)?;
    if training_clusters.is_empty() {
        return Err(Error::TooFewClusters {
            needed: 1,
            found: 0,
        });
    }
    let x_dim = dataset.x_dim();
    let v_dim = dataset.w_dim();
    let pi_cols = maps.propensity.output_dim(x_dim, v_dim)?;
    let mu_cols = maps.outcome.output_dim(x_dim, v_dim)?;

    let mut pi_design = Matrix::new(pi_cols);
    let mut pi_labels: Vec<f64> = Vec::new();
    let mut mu_design = Matrix::new(mu_cols);
    let mut mu_targets: Vec<f64> = Vec::new();
    let mut feats = Vec::new();
    let mut sorted = training_clusters.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    for &g in &sorted {
        let cluster = dataset
            .clusters()
            .get(g)
            .ok_or(Error::ClusterIndexOutOfRange {
                index: g,
                len: dataset.n_clusters(),
            })?;
        for m in &cluster.members {
            maps.propensity.build(&cluster.x, &m.w, &mut feats)?;
            pi_design.push_row(&feats);
            pi_labels.push(if m.r { 1.0 } else { 0.0 });
            if let Some(y) = m.y {
                maps.outcome.build(&cluster.x, &m.w, &mut feats)?;
                mu_design.push_row(&feats);
                mu_targets.push(y);
            }
        }
    }
    if mu_targets.is_empty() {
        return Err(Error::NoObservedOutcomes);
    }
    let logistic_fit = fit_logistic(&pi_design, &pi_labels, &LogisticConfig::default())?;
    let ols = fit_ols(&mu_design, &mu_targets, 0.0)?;
    Ok(NuisanceFit {
        propensity: GlmFit {
            link: Link::Logit,
            feature_map: maps.propensity.clone(),
            coefficients: logistic_fit.coefficients,
            training_clusters: sorted.clone(),
            converged: logistic_fit.converged,
            ridge_jitter: false,
        },
        outcome: GlmFit {
            link: Link::Identity,
            feature_map: maps.outcome.clone(),
            coefficients: ols.coefficients,
            training_clusters: sorted,
            converged: true,
            ridge_jitter: ols.ridge_jitter,
        },
        clip_epsilon,
    })
}

/// Paired (propensity, outcome) predictions aligned to a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionPanel {
    pub pi_hat: ClusterPanel,
    pub mu_hat: ClusterPanel,
}

impl PredictionPanel {
    pub fn check_aligned(&self, dataset: &ClusteredDataset) -> Result<()> {
        self.pi_hat.check_aligned(dataset)?;
        self.mu_hat.check_aligned(dataset)
    }
}

/// Evaluate one nuisance fit on every individual of a dataset.
pub fn predict_panel(dataset: &ClusteredDataset, fit: &NuisanceFit) -> Result<PredictionPanel> {
    let mut pi = ClusterPanel::zeros_like(dataset);
    let mut mu = ClusterPanel::zeros_like(dataset);
    for (g, cluster) in dataset.clusters().iter().enumerate() {
        for (i, m) in cluster.members.iter().enumerate() {
            let pred = fit.predict(&cluster.x, &m.w)?;
            pi.set(g, i, pred.pi_hat);
            mu.set(g, i, pred.mu_hat);
        }
    }
    Ok(PredictionPanel {
        pi_hat: pi,
        mu_hat: mu,
    })
}

/// Deterministically assign clusters to folds: a seeded shuffle dealt
/// round-robin, so fold sizes differ by at most one.
pub fn assign_folds(n_clusters: usize, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::invalid(
            "folds",
            format!("{folds} is below the minimum of 2"),
        ));
    }
    if n_clusters < folds {
        return Err(Error::TooFewClusters {
            needed: folds,
            found: n_clusters,
        });
    }
    let mut order: Vec<usize> = (0..n_clusters).collect();
    let mut rng = stream(seed, StreamRole::FoldAssign, &[]);
    order.shuffle(&mut rng);
    let mut assignment = vec![0usize; n_clusters];
    for (pos, &g) in order.iter().enumerate() {
        assignment[g] = pos % folds;
    }
    Ok(assignment)
}

/// Cluster-level cross-fitting: for each fold, fit the nuisances on the
/// other folds and predict the held-out clusters, yielding out-of-fold
/// predictions for every individual.
pub fn cross_fit(
    dataset: &ClusteredDataset,
    folds: usize,
    maps: &NuisanceMaps,
    clip_epsilon: f64,
    seed: u64,
) -> Result<PredictionPanel> {
    let assignment = assign_folds(dataset.n_clusters(), folds, seed)?;
    let mut pi = ClusterPanel::zeros_like(dataset);
    let mut mu = ClusterPanel::zeros_like(dataset);
    for fold in 0..folds {
        let training: Vec<usize> = (0..dataset.n_clusters())
            .filter(|&g| assignment[g] != fold)
            .collect();
        let fit = fit_nuisances(dataset, &training, maps, clip_epsilon)?;
        for (g, cluster) in dataset.clusters().iter().enumerate() {
            if assignment[g] != fold {
                continue;
            }
            for (i, m) in cluster.members.iter().enumerate() {
                let pred = fit.predict(&cluster.x, &m.w)?;
                pi.set(g, i, pred.pi_hat);
                mu.set(g, i, pred.mu_hat);
            }
        }
    }
    Ok(PredictionPanel {
        pi_hat: pi,
        mu_hat: mu,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Cluster;
    use crate::rng::{stream, StreamRole};
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn feature_maps_have_fixed_dimensions_and_contents() {
        let x = [0.5];
        let v = [2.0, -1.0];
        let mut out = Vec::new();
        FeatureMap::Linear.build(&x, &v, &mut out).unwrap();
        assert_eq!(out, vec![0.5, 2.0, -1.0]);
        assert_eq!(FeatureMap::Linear.output_dim(1, 2).unwrap(), 3);
        FeatureMap::QuadraticInW.build(&x, &v, &mut out).unwrap();
        assert_eq!(out, vec![0.5, 2.0, -1.0, 4.0, 1.0]);
        assert_eq!(FeatureMap::QuadraticInW.output_dim(1, 2).unwrap(), 5);
        FeatureMap::HistorySummary.build(&x, &v, &mut out).unwrap();
        assert_eq!(out, vec![0.5, 2.0, -1.0]);
        let custom = FeatureMap::Custom {
            name: "spline".into(),
        };
        assert!(matches!(
            custom.build(&x, &v, &mut out).unwrap_err(),
            Error::UnsupportedFeatureMap { .. }
        ));
    }

    #[test]
    fn logistic_recovers_generating_coefficients() {
        // y ~ Bernoulli(logistic(0.5 + 1.5 x)), n = 5000; the fit lands
        // within 0.1 of the generating values (coefficient standard errors
        // are well under 0.07 at this size).
        let mut rng = stream(314, StreamRole::Data, &[]);
        let mut design = Matrix::new(1);
        let mut labels = Vec::new();
        for _ in 0..5000 {
            let x: f64 = rng.sample(StandardNormal);
            let p = logistic(0.5 + 1.5 * x);
            design.push_row(&[x]);
            labels.push(if rng.random::<f64>() < p { 1.0 } else { 0.0 });
        }
        let fit = fit_logistic(&design, &labels, &LogisticConfig::default()).unwrap();
        assert!(fit.converged);
        assert!((fit.coefficients[0] - 0.5).abs() < 0.1);
        assert!((fit.coefficients[1] - 1.5).abs() < 0.1);
    }

    #[test]
    fn logistic_on_balanced_noise_gives_zero_intercept() {
        // All-zero feature with balanced labels: intercept stays at 0 and
        // the gradient is already zero at the start.
        let mut design = Matrix::new(1);
        let mut labels = Vec::new();
        for i in 0..10 {
            design.push_row(&[0.0]);
            labels.push((i % 2) as f64);
        }
        let fit = fit_logistic(&design, &labels, &LogisticConfig::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.coefficients[0].abs() < 1e-10);
    }

    #[test]
    fn logistic_rejects_bad_inputs() {
        let mut design = Matrix::new(1);
        design.push_row(&[1.0]);
        design.push_row(&[2.0]);
        assert!(matches!(
            fit_logistic(&design, &[1.0, 1.0], &LogisticConfig::default()).unwrap_err(),
            Error::SingleClassLabels
        ));
        assert!(matches!(
            fit_logistic(&design, &[1.0, 0.5], &LogisticConfig::default()).unwrap_err(),
            Error::NonBinaryLabels
        ));
        assert!(matches!(
            fit_logistic(&design, &[1.0], &LogisticConfig::default()).unwrap_err(),
            Error::DesignResponseMismatch { .. }
        ));
        let mut bad = Matrix::new(1);
        bad.push_row(&[f64::NAN]);
        bad.push_row(&[1.0]);
        assert!(matches!(
            fit_logistic(&bad, &[0.0, 1.0], &LogisticConfig::default()).unwrap_err(),
            Error::NonFiniteInput { .. }
        ));
    }

    #[test]
    fn logistic_separable_data_stays_finite_under_the_ridge() {
        // Perfectly separated labels have no unpenalized optimum; the ridge
        // pins a finite one, with a steep but bounded slope.
        let mut design = Matrix::new(1);
        let mut labels = Vec::new();
        for i in 0..40 {
            let x = if i < 20 { -1.0 - 0.05 * i as f64 } else { 1.0 + 0.05 * i as f64 };
            design.push_row(&[x]);
            labels.push(if x > 0.0 { 1.0 } else { 0.0 });
        }
        let fit = fit_logistic(&design, &labels, &LogisticConfig::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.coefficients.iter().all(|b| b.is_finite()));
        assert!(fit.coefficients[1] > 5.0);
        assert!(logistic(fit.coefficients[0] + fit.coefficients[1]) > 0.99);
        assert!(logistic(fit.coefficients[0] - fit.coefficients[1]) < 0.01);
    }

    #[test]
    fn ols_is_exact_on_an_exact_line() {
        let mut design = Matrix::new(1);
        let mut targets = Vec::new();
        for i in 0..50 {
            let f = i as f64 / 7.0 - 3.0;
            design.push_row(&[f]);
            targets.push(1.0 + 2.0 * f);
        }
        let fit = fit_ols(&design, &targets, 0.0).unwrap();
        assert!(!fit.ridge_jitter);
        assert!((fit.coefficients[0] - 1.0).abs() < 1e-10);
        assert!((fit.coefficients[1] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn ols_residuals_are_orthogonal_to_the_design() {
        let mut rng = stream(99, StreamRole::Data, &[]);
        let n = 200;
        let mut design = Matrix::new(3);
        let mut targets = Vec::new();
        for _ in 0..n {
            let r: [f64; 3] = [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ];
            design.push_row(&r);
            targets.push(rng.sample::<f64, _>(StandardNormal) * 2.0 + r[0] - r[2]);
        }
        let fit = fit_ols(&design, &targets, 0.0).unwrap();
        let mut dots = vec![0.0; 4];
        for i in 0..n {
            let row = design.row(i);
            let pred = fit.coefficients[0]
                + fit.coefficients[1] * row[0]
                + fit.coefficients[2] * row[1]
                + fit.coefficients[3] * row[2];
            let resid = targets[i] - pred;
            dots[0] += resid;
            for k in 0..3 {
                dots[k + 1] += resid * row[k];
            }
        }
        let bound = 1e-8 * n as f64;
        assert!(dots.iter().all(|d| d.abs() <= bound));
    }

    #[test]
    fn ols_rank_deficiency_falls_back_to_jitter_and_flags() {
        // Second column duplicates the first: singular normal equations.
        let mut design = Matrix::new(2);
        let mut targets = Vec::new();
        for i in 0..20 {
            let f = i as f64;
            design.push_row(&[f, f]);
            targets.push(3.0 * f);
        }
        let fit = fit_ols(&design, &targets, 0.0).unwrap();
        assert!(fit.ridge_jitter);
        // The jittered solution still reproduces fitted values.
        let pred = fit.coefficients[0] + fit.coefficients[1] * 5.0 + fit.coefficients[2] * 5.0;
        assert!((pred - 15.0).abs() < 1e-3);
    }

    #[test]
    fn predict_applies_link_and_clipping() {
        // Known logit model (intercept 1, slope 2) at w = 1: logistic(3).
        let fit = NuisanceFit::from_known(
            GlmFit::known(Link::Logit, FeatureMap::Linear, vec![1.0, 2.0]),
            GlmFit::known(Link::Identity, FeatureMap::Linear, vec![0.0, 0.0]),
            0.01,
        )
        .unwrap();
        let pred = fit.predict(&[], &[1.0]).unwrap();
        assert!((pred.pi_hat - 0.952_574_126_822_433_4).abs() < 1e-12);
        assert_eq!(pred.mu_hat, 0.0);
        // Strongly negative linear predictor clips at epsilon.
        let low = fit.predict(&[], &[-10.0]).unwrap();
        assert_eq!(low.pi_hat, 0.01);
    }

    #[test]
    fn known_fit_rejects_wrong_coefficient_length() {
        let fit = NuisanceFit::from_known(
            GlmFit::known(Link::Logit, FeatureMap::Linear, vec![1.0, 2.0]),
            GlmFit::known(Link::Identity, FeatureMap::Linear, vec![0.0, 0.0]),
            0.01,
        )
        .unwrap();
        assert!(matches!(
            fit.predict(&[0.3], &[1.0]).unwrap_err(),
            Error::CoefficientLength {
                found: 2,
                expected: 3
            }
        ));
    }

    fn synthetic_dataset(n_clusters: usize, size: usize, seed: u64) -> ClusteredDataset {
        // x ~ N(0,1) per cluster, w ~ N(x, 1), r ~ Bernoulli(logistic(x + .5 w)),
        // y = -x + w + .5 + noise when observed.
        let mut rng = stream(seed, StreamRole::Data, &[]);
        let clusters = (0..n_clusters)
            .map(|_| {
                let x: f64 = rng.sample(StandardNormal);
                let rows = (0..size)
                    .map(|_| {
                        let w = x + rng.sample::<f64, _>(StandardNormal);
                        let p = logistic(x + 0.5 * w);
                        let y = if rng.random::<f64>() < p {
                            Some(-x + w + 0.5 + rng.sample::<f64, _>(StandardNormal))
                        } else {
                            None
                        };
                        (vec![w], y)
                    })
                    .collect();
                Cluster::from_rows(vec![x], rows)
            })
            .collect();
        ClusteredDataset::new(clusters).unwrap()
    }

    #[test]
    fn fitted_nuisances_track_the_generating_models_out_of_sample() {
        let data = synthetic_dataset(1500, 10, 2024);
        let training: Vec<usize> = (0..750).collect();
        let fit = fit_nuisances(&data, &training, &NuisanceMaps::linear(), 0.01).unwrap();
        assert_eq!(fit.propensity.training_clusters.len(), 750);
        for &x in &[-1.0, 0.0, 1.0] {
            for &w in &[-2.0, 0.0, 2.0] {
                let pred = fit.predict(&[x], &[w]).unwrap();
                let true_pi = logistic(x + 0.5 * w);
                let true_mu = -x + w + 0.5;
                assert!(
                    (pred.pi_hat - true_pi.max(0.01)).abs() < 0.05,
                    "pi at ({x}, {w}): {} vs {true_pi}",
                    pred.pi_hat
                );
                assert!(
                    (pred.mu_hat - true_mu).abs() < 0.15,
                    "mu at ({x}, {w}): {} vs {true_mu}",
                    pred.mu_hat
                );
            }
        }
    }

    #[test]
    fn misspecified_linear_outcome_is_badly_biased_where_curvature_matters() {
        // Quadratic truth fit with a linear map: on |w| > 2 the linear fit
        // misses by far more than 0.5 on average.
        let mut rng = stream(77, StreamRole::Data, &[]);
        let clusters: Vec<Cluster> = (0..800)
            .map(|_| {
                let x: f64 = rng.sample(StandardNormal);
                let rows = (0..8)
                    .map(|_| {
                        let w = x + 2.0 * rng.sample::<f64, _>(StandardNormal);
                        let p = logistic(x + 0.5 * w * w);
                        let y = if rng.random::<f64>() < p {
                            Some(-x + w * w + rng.sample::<f64, _>(StandardNormal))
                        } else {
                            None
                        };
                        (vec![w], y)
                    })
                    .collect();
                Cluster::from_rows(vec![x], rows)
            })
            .collect();
        let data = ClusteredDataset::new(clusters).unwrap();
        let training: Vec<usize> = (0..800).collect();
        let fit = fit_nuisances(&data, &training, &NuisanceMaps::linear(), 0.01).unwrap();
        let grid = [-4.0, -3.0, -2.5, 2.5, 3.0, 4.0];
        let mut abs_bias = 0.0;
        for &w in &grid {
            let pred = fit.predict(&[0.0], &[w]).unwrap();
            abs_bias += (pred.mu_hat - w * w).abs();
        }
        abs_bias /= grid.len() as f64;
        assert!(abs_bias > 0.5, "mean absolute bias {abs_bias}");
    }

    #[test]
    fn fit_nuisances_requires_observed_outcomes_and_valid_indices() {
        let clusters = vec![
            Cluster::from_rows(vec![0.0], vec![(vec![1.0], None), (vec![2.0], None)]),
            Cluster::from_rows(vec![0.0], vec![(vec![1.0], Some(1.0))]),
        ];
        let data = ClusteredDataset::new(clusters).unwrap();
        assert!(matches!(
            fit_nuisances(&data, &[0], &NuisanceMaps::linear(), 0.01).unwrap_err(),
            Error::NoObservedOutcomes
        ));
        assert!(matches!(
            fit_nuisances(&data, &[5], &NuisanceMaps::linear(), 0.01).unwrap_err(),
            Error::ClusterIndexOutOfRange { .. }
        ));
        assert!(fit_nuisances(&data, &[0, 1], &NuisanceMaps::linear(), 0.7).is_err());
    }

    #[test]
    fn fold_assignment_is_balanced_and_deterministic() {
        let a = assign_folds(10, 4, 5).unwrap();
        let b = assign_folds(10, 4, 5).unwrap();
        assert_eq!(a, b);
        let mut counts = vec![0usize; 4];
        for &f in &a {
            counts[f] += 1;
        }
        assert_eq!(counts.iter().sum::<usize>(), 10);
        assert!(counts.iter().all(|&c| c == 2 || c == 3));
        assert!(assign_folds(3, 4, 0).is_err());
        assert!(assign_folds(10, 1, 0).is_err());
    }

    #[test]
    fn leave_one_cluster_out_assigns_each_cluster_its_own_fold() {
        let a = assign_folds(5, 5, 9).unwrap();
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
        let data = synthetic_dataset(5, 40, 31);
        let panel = cross_fit(&data, 5, &NuisanceMaps::linear(), 0.01, 9).unwrap();
        panel.check_aligned(&data).unwrap();
    }

    #[test]
    fn cross_fit_predictions_ignore_the_held_out_cluster() {
        // Perturbing the outcomes of one cluster must not change that
        // cluster's own out-of-fold predictions.
        let data = synthetic_dataset(12, 25, 404);
        let panel = cross_fit(&data, 3, &NuisanceMaps::linear(), 0.01, 8).unwrap();
        let target = 4usize;
        let mut clusters = data.clusters().to_vec();
        for m in &mut clusters[target].members {
            if let Some(y) = m.y.as_mut() {
                *y += 1000.0;
            }
        }
        let perturbed = ClusteredDataset::new(clusters).unwrap();
        let panel2 = cross_fit(&perturbed, 3, &NuisanceMaps::linear(), 0.01, 8).unwrap();
        for i in 0..data.clusters()[target].len() {
            assert_eq!(
                panel.mu_hat.get(target, i).to_bits(),
                panel2.mu_hat.get(target, i).to_bits()
            );
            assert_eq!(
                panel.pi_hat.get(target, i).to_bits(),
                panel2.pi_hat.get(target, i).to_bits()
            );
        }
        // A cluster in a different fold is predicted by a model trained on
        // the perturbed cluster, so its predictions did change.
        let assignment = assign_folds(data.n_clusters(), 3, 8).unwrap();
        let other = (0..data.n_clusters())
            .find(|&g| assignment[g] != assignment[target])
            .unwrap();
        let changed = (0..data.clusters()[other].len())
            .any(|i| panel.mu_hat.get(other, i) != panel2.mu_hat.get(other, i));
        assert!(changed);
    }

    #[test]
    fn clipping_bounds_every_cross_fit_propensity() {
        let data = synthetic_dataset(40, 12, 61);
        let eps = 0.05;
        let panel = cross_fit(&data, 2, &NuisanceMaps::linear(), eps, 3).unwrap();
        for g in 0..data.n_clusters() {
            for i in 0..data.clusters()[g].len() {
                let pi = panel.pi_hat.get(g, i);
                assert!(pi >= eps && pi <= 1.0);
            }
        }
    }
}
