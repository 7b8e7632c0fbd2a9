//! Monte Carlo drivers. Each experiment maps replicate indices to derived
//! seeds, runs the replicates in a rayon pool with an indexed collect, and
//! aggregates in replicate order, so reports are byte-identical for a given
//! seed at any thread count.

use crate::error::{Error, Result};
use crate::estimators::{
    estimate_dr, estimate_dr_sequential, estimate_ipw, estimate_plugin, influence_values,
    observed_mean, SummaryConfig,
};
use crate::nuisance::{cross_fit, predict_panel, FeatureMap, NuisanceMaps};
use crate::numeric::kahan_sum;
use crate::rng::{subseed, StreamRole};
use crate::simulation::dgp::{
    gen_homogeneous, gen_quadratic, gen_sequential, HomogeneousDgp, QuadraticDgp, SequentialDgp,
};
use crate::variance::{var_cluster_robust, var_iid, wald_ci};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// One curve point: an arm label, the grid value it sits at, and the
/// Monte Carlo estimate of its metric with a standard error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: String,
    pub x_value: f64,
    pub metric: String,
    pub value: f64,
    pub mc_se: f64,
    pub replications_used: usize,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub experiment: String,
    pub seed: u64,
    pub replications: usize,
    pub arms: Vec<ArmReport>,
}

pub(crate) fn run_parallel<T, F>(threads: usize, reps: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    // num_threads(0) lets the pool size itself from the environment.
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Internal {
            details: format!("thread pool: {e}"),
        })?;
    Ok(pool.install(|| (0..reps).into_par_iter().map(f).collect()))
}

/// Split replicate results into successes and a failure count; if nothing
/// succeeded the whole experiment is unreportable.
fn partition<T>(results: Vec<Result<T>>) -> Result<(Vec<T>, usize)> {
    let total = results.len();
    let mut ok = Vec::with_capacity(total);
    let mut first: Option<Error> = None;
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                if first.is_none() {
                    first = Some(e);
                }
            }
        }
    }
    if ok.is_empty() {
        return Err(Error::AllReplicationsFailed {
            total,
            first: first
                .map(|e| e.to_string())
                .unwrap_or_else(|| "no replications requested".into()),
        });
    }
    let failures = total - ok.len();
    Ok((ok, failures))
}

fn check_reps(replications: usize) -> Result<()> {
    if replications == 0 {
        return Err(Error::invalid("replications", "must be at least 1"));
    }
    Ok(())
}

/// Mean and the standard error of the mean; the error is reported as zero
/// when only a single replicate survived.
fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let m = values.len() as f64;
    let mean = kahan_sum(values) / m;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let mut ss = 0.0;
    for &v in values {
        let d = v - mean;
        ss += d * d;
    }
    (mean, (ss / (m - 1.0) / m).sqrt())
}

fn binomial_se(p: f64, m: usize) -> f64 {
    (p * (1.0 - p) / m as f64).sqrt()
}

/// Confidence interval coverage of the doubly robust estimator under the
/// homogeneous process, comparing the within-cluster-independence variance
/// with the cluster-robust one across cluster-size exponents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoverageConfig {
    pub dgp: HomogeneousDgp,
    pub n: usize,
    /// Cluster-size exponents to sweep; overrides `dgp.alpha` per point.
    pub alphas: Vec<f64>,
    pub replications: usize,
    pub ci_level: f64,
    pub folds: usize,
    pub clip_epsilon: f64,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        Self {
            dgp: HomogeneousDgp::default(),
            n: 10_000,
            alphas: vec![0.2, 0.4],
            replications: 300,
            ci_level: 0.95,
            folds: 2,
            clip_epsilon: 0.01,
        }
    }
}

pub fn run_coverage_experiment(
    config: &CoverageConfig,
    seed: u64,
    threads: usize,
) -> Result<MonteCarloReport> {
    check_reps(config.replications)?;
    if config.alphas.is_empty() {
        return Err(Error::invalid("alphas", "grid must not be empty"));
    }
    if !(config.ci_level > 0.0 && config.ci_level < 1.0) {
        return Err(Error::invalid(
            "ci level",
            format!("{} outside (0, 1)", config.ci_level),
        ));
    }
    let maps = NuisanceMaps::linear();
    let mut arms = Vec::with_capacity(2 * config.alphas.len());
    for (a, &alpha) in config.alphas.iter().enumerate() {
        let spec = HomogeneousDgp {
            alpha,
            ..config.dgp.clone()
        };
        let results = run_parallel(threads, config.replications, |r| -> Result<(bool, bool)> {
            let gen = gen_homogeneous(
                &spec,
                config.n,
                subseed(seed, StreamRole::Data, &[a as u64, r as u64, 0]),
            )?;
            let preds = cross_fit(
                &gen.dataset,
                config.folds,
                &maps,
                config.clip_epsilon,
                subseed(seed, StreamRole::Data, &[a as u64, r as u64, 1]),
            )?;
            let panel = influence_values(&gen.dataset, &preds)?;
            let theta = panel.mean();
            if !theta.is_finite() {
                return Err(Error::NonFiniteEstimate);
            }
            let covers = |lo: f64, hi: f64| lo <= gen.truth && gen.truth <= hi;
            let vi = var_iid(&panel, theta)?;
            let (lo, hi) = wald_ci(theta, vi.estimate_variance, config.ci_level)?;
            let iid_covered = covers(lo, hi);
            let vc = var_cluster_robust(&gen.dataset, &panel, theta, false)?;
            // A degenerate variance yields no interval, hence no coverage.
            let cr_covered = if vc.degenerate {
                false
            } else {
                let (lo, hi) = wald_ci(theta, vc.estimate_variance, config.ci_level)?;
                covers(lo, hi)
            };
            Ok((iid_covered, cr_covered))
        })?;
        let (ok, failures) = partition(results)?;
        let used = ok.len();
        for (label, pick) in [
            ("iid", 0usize),
            ("cluster_robust", 1usize),
        ] {
            let hits = ok
                .iter()
                .filter(|&&(i, c)| if pick == 0 { i } else { c })
                .count();
            let p = hits as f64 / used as f64;
            arms.push(ArmReport {
                arm: format!("alpha={alpha}/{label}"),
                x_value: alpha,
                metric: "coverage".into(),
                value: p,
                mc_se: binomial_se(p, used),
                replications_used: used,
                failures,
            });
        }
    }
    Ok(MonteCarloReport {
        experiment: "coverage".into(),
        seed,
        replications: config.replications,
        arms,
    })
}

/// Root-mean-square error of the sequential estimator against two ablations
/// (current covariates only, and the raw observed mean) across sample sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmseConfig {
    pub dgp: SequentialDgp,
    pub n_grid: Vec<usize>,
    pub replications: usize,
    pub folds: usize,
    pub clip_epsilon: f64,
}

impl Default for RmseConfig {
    fn default() -> Self {
        Self {
            dgp: SequentialDgp::default(),
            n_grid: vec![1000, 2000, 4000, 8000],
            replications: 200,
            folds: 2,
            clip_epsilon: 0.01,
        }
    }
}

pub fn run_rmse_experiment(
    config: &RmseConfig,
    seed: u64,
    threads: usize,
) -> Result<MonteCarloReport> {
    check_reps(config.replications)?;
    if config.n_grid.is_empty() {
        return Err(Error::invalid("n grid", "must not be empty"));
    }
    let maps = NuisanceMaps::linear();
    let history = SummaryConfig::max_min_mean();
    let current = SummaryConfig::current_only();
    let mut arms = Vec::with_capacity(3 * config.n_grid.len());
    for (i, &n) in config.n_grid.iter().enumerate() {
        let results = run_parallel(threads, config.replications, |r| -> Result<[f64; 3]> {
            let gen = gen_sequential(
                &config.dgp,
                n,
                subseed(seed, StreamRole::Data, &[i as u64, r as u64, 0]),
            )?;
            // Both adjusted arms share the fit seed so fold assignments match.
            let fit_seed = subseed(seed, StreamRole::Data, &[i as u64, r as u64, 1]);
            let with_history = estimate_dr_sequential(
                &gen.dataset,
                &history,
                &maps,
                config.folds,
                config.clip_epsilon,
                fit_seed,
            )?;
            let current_only = estimate_dr_sequential(
                &gen.dataset,
                &current,
                &maps,
                config.folds,
                config.clip_epsilon,
                fit_seed,
            )?;
            let unadjusted = observed_mean(&gen.dataset)?;
            let sq = |v: f64| (v - gen.truth) * (v - gen.truth);
            Ok([
                sq(with_history.theta_hat),
                sq(current_only.theta_hat),
                sq(unadjusted),
            ])
        })?;
        let (ok, failures) = partition(results)?;
        let used = ok.len();
        for (k, label) in ["history_summary", "current_only", "unadjusted"]
            .iter()
            .enumerate()
        {
            let sq: Vec<f64> = ok.iter().map(|row| row[k]).collect();
            let (mse, mse_se) = mean_and_se(&sq);
            let rmse = mse.sqrt();
            // Delta method: se(sqrt(m)) = se(m) / (2 sqrt(m)).
            let mc_se = if rmse > 0.0 { mse_se / (2.0 * rmse) } else { 0.0 };
            arms.push(ArmReport {
                arm: (*label).into(),
                x_value: n as f64,
                metric: "rmse".into(),
                value: rmse,
                mc_se,
                replications_used: used,
                failures,
            });
        }
    }
    Ok(MonteCarloReport {
        experiment: "rmse".into(),
        seed,
        replications: config.replications,
        arms,
    })
}

/// Mean squared error of the three estimators when each nuisance model is
/// fit on the correct (quadratic) or wrong (linear) feature map, on data
/// whose true models are quadratic in the member covariate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MisspecConfig {
    pub dgp: QuadraticDgp,
    pub n: usize,
    pub cluster_size: usize,
    pub replications: usize,
    pub folds: usize,
    pub clip_epsilon: f64,
}

impl Default for MisspecConfig {
    fn default() -> Self {
        Self {
            dgp: QuadraticDgp::default(),
            n: 10_000,
            cluster_size: 100,
            replications: 200,
            folds: 2,
            clip_epsilon: 0.01,
        }
    }
}

const MISSPEC_SPECS: [&str; 4] = [
    "mu_correct_pi_correct",
    "mu_correct_pi_wrong",
    "mu_wrong_pi_correct",
    "mu_wrong_pi_wrong",
];

fn misspec_maps(spec: &str) -> NuisanceMaps {
    let pick = |correct: bool| {
        if correct {
            FeatureMap::QuadraticInW
        } else {
            FeatureMap::Linear
        }
    };
    NuisanceMaps {
        propensity: pick(spec.contains("pi_correct")),
        outcome: pick(spec.contains("mu_correct")),
    }
}

pub fn run_misspec_experiment(
    config: &MisspecConfig,
    seed: u64,
    threads: usize,
) -> Result<MonteCarloReport> {
    check_reps(config.replications)?;
    let results = run_parallel(threads, config.replications, |r| -> Result<[[f64; 3]; 4]> {
        let gen = gen_quadratic(
            &config.dgp,
            config.n,
            config.cluster_size,
            subseed(seed, StreamRole::Data, &[r as u64, 0]),
        )?;
        // One fold seed per replicate, shared across specifications, so the
        // four model pairs see identical training splits.
        let fit_seed = subseed(seed, StreamRole::Data, &[r as u64, 1]);
        let mut out = [[0.0; 3]; 4];
        for (s, spec) in MISSPEC_SPECS.iter().enumerate() {
            let maps = misspec_maps(spec);
            let preds = cross_fit(
                &gen.dataset,
                config.folds,
                &maps,
                config.clip_epsilon,
                fit_seed,
            )?;
            let sq = |v: f64| (v - gen.truth) * (v - gen.truth);
            out[s] = [
                sq(estimate_plugin(&gen.dataset, &preds)?.theta_hat),
                sq(estimate_ipw(&gen.dataset, &preds)?.theta_hat),
                sq(estimate_dr(&gen.dataset, &preds)?.theta_hat),
            ];
        }
        Ok(out)
    })?;
    let (ok, failures) = partition(results)?;
    let used = ok.len();
    let mut arms = Vec::with_capacity(12);
    for (s, spec) in MISSPEC_SPECS.iter().enumerate() {
        for (k, est) in ["plugin", "ipw", "dr"].iter().enumerate() {
            let sq: Vec<f64> = ok.iter().map(|rep| rep[s][k]).collect();
            let (mse, mc_se) = mean_and_se(&sq);
            arms.push(ArmReport {
                arm: format!("{spec}/{est}"),
                x_value: config.n as f64,
                metric: "mse".into(),
                value: mse,
                mc_se,
                replications_used: used,
                failures,
            });
        }
    }
    Ok(MonteCarloReport {
        experiment: "misspec".into(),
        seed,
        replications: config.replications,
        arms,
    })
}

/// Check the cluster-robust variance statistic against a brute-force target:
/// the per-cluster variance of influence sums across independent datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OmegaAgreementConfig {
    pub dgp: HomogeneousDgp,
    pub n: usize,
    /// Replicates over which the statistic is averaged.
    pub estimator_reps: usize,
    /// Independent datasets used for the brute-force target.
    pub brute_force_reps: usize,
    pub clip_epsilon: f64,
}

impl Default for OmegaAgreementConfig {
    fn default() -> Self {
        Self {
            dgp: HomogeneousDgp::default(),
            n: 10_000,
            estimator_reps: 300,
            brute_force_reps: 2000,
            clip_epsilon: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmegaAgreementReport {
    pub n: usize,
    pub estimator_reps: usize,
    pub brute_force_reps: usize,
    pub seed: u64,
    pub mean_omega_hat: f64,
    pub omega_hat_se: f64,
    pub brute_force_omega: f64,
    pub ratio: f64,
}

/// Influence values under the generating models themselves, so agreement is
/// a property of the variance statistic rather than of nuisance estimation.
pub fn run_omega_agreement(
    config: &OmegaAgreementConfig,
    seed: u64,
    threads: usize,
) -> Result<OmegaAgreementReport> {
    check_reps(config.estimator_reps)?;
    if config.brute_force_reps < 2 {
        return Err(Error::invalid(
            "brute force replications",
            "needs at least 2 to form a variance",
        ));
    }
    let fit = config.dgp.true_nuisances(config.clip_epsilon)?;

    let est = run_parallel(threads, config.estimator_reps, |r| -> Result<f64> {
        let gen = gen_homogeneous(
            &config.dgp,
            config.n,
            subseed(seed, StreamRole::Data, &[0, r as u64]),
        )?;
        let preds = predict_panel(&gen.dataset, &fit)?;
        let panel = influence_values(&gen.dataset, &preds)?;
        let vr = var_cluster_robust(&gen.dataset, &panel, panel.mean(), false)?;
        vr.omega_hat.ok_or(Error::Internal {
            details: "cluster-robust report lacks the per-individual scale".into(),
        })
    })?;
    let omegas = est.into_iter().collect::<Result<Vec<f64>>>()?;
    let (mean_omega_hat, omega_hat_se) = mean_and_se(&omegas);

    let sums = run_parallel(threads, config.brute_force_reps, |r| -> Result<Vec<f64>> {
        let gen = gen_homogeneous(
            &config.dgp,
            config.n,
            subseed(seed, StreamRole::Data, &[1, r as u64]),
        )?;
        let preds = predict_panel(&gen.dataset, &fit)?;
        Ok(influence_values(&gen.dataset, &preds)?.cluster_sums())
    })?;
    let sums = sums.into_iter().collect::<Result<Vec<Vec<f64>>>>()?;
    let g = sums[0].len();
    let b = sums.len() as f64;
    let mut acc = vec![(0.0f64, 0.0f64); g];
    for rep in &sums {
        if rep.len() != g {
            return Err(Error::Internal {
                details: "cluster count changed across brute-force replicates".into(),
            });
        }
        for (a, &t) in acc.iter_mut().zip(rep) {
            a.0 += t;
            a.1 += t * t;
        }
    }
    // (1/n) sum_g Var(T_g): clusters are independent, so this is the exact
    // finite-sample variance of the scaled influence sum.
    let mut total_var = 0.0;
    for &(s, s2) in &acc {
        total_var += (s2 - s * s / b) / (b - 1.0);
    }
    let brute_force_omega = total_var / config.n as f64;

    Ok(OmegaAgreementReport {
        n: config.n,
        estimator_reps: config.estimator_reps,
        brute_force_reps: config.brute_force_reps,
        seed,
        mean_omega_hat,
        omega_hat_se,
        brute_force_omega,
        ratio: mean_omega_hat / brute_force_omega,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_coverage_config() -> CoverageConfig {
        CoverageConfig {
            n: 400,
            alphas: vec![0.4],
            replications: 20,
            ..CoverageConfig::default()
        }
    }

    #[test]
    fn coverage_report_shape_and_bounds() {
        let report = run_coverage_experiment(&small_coverage_config(), 7, 2).unwrap();
        assert_eq!(report.experiment, "coverage");
        assert_eq!(report.arms.len(), 2);
        assert_eq!(report.arms[0].arm, "alpha=0.4/iid");
        assert_eq!(report.arms[1].arm, "alpha=0.4/cluster_robust");
        for arm in &report.arms {
            assert!(arm.value >= 0.0 && arm.value <= 1.0);
            assert_eq!(arm.replications_used + arm.failures, 20);
            assert_eq!(arm.metric, "coverage");
            assert_eq!(arm.x_value, 0.4);
        }
    }

    #[test]
    fn coverage_is_thread_count_invariant() {
        let cfg = small_coverage_config();
        let one = run_coverage_experiment(&cfg, 11, 1).unwrap();
        let four = run_coverage_experiment(&cfg, 11, 4).unwrap();
        assert_eq!(
            serde_json::to_string(&one).unwrap(),
            serde_json::to_string(&four).unwrap()
        );
        let other_seed = run_coverage_experiment(&cfg, 12, 1).unwrap();
        assert_ne!(
            serde_json::to_string(&one).unwrap(),
            serde_json::to_string(&other_seed).unwrap()
        );
    }

    #[test]
    fn rmse_report_covers_the_grid() {
        let cfg = RmseConfig {
            n_grid: vec![300, 600],
            replications: 10,
            ..RmseConfig::default()
        };
        let report = run_rmse_experiment(&cfg, 3, 2).unwrap();
        assert_eq!(report.arms.len(), 6);
        let labels: Vec<&str> = report.arms.iter().map(|a| a.arm.as_str()).collect();
        assert_eq!(
            labels,
            vec![
                "history_summary",
                "current_only",
                "unadjusted",
                "history_summary",
                "current_only",
                "unadjusted"
            ]
        );
        assert_eq!(report.arms[0].x_value, 300.0);
        assert_eq!(report.arms[3].x_value, 600.0);
        for arm in &report.arms {
            assert!(arm.value.is_finite() && arm.value > 0.0, "{arm:?}");
            assert!(arm.mc_se.is_finite() && arm.mc_se >= 0.0);
        }
    }

    #[test]
    fn rmse_surfaces_total_failure() {
        let mut dgp = SequentialDgp::default();
        dgp.mu_coef[1] = 2.0; // no closed-form estimand, every replicate errors
        let cfg = RmseConfig {
            dgp,
            n_grid: vec![300],
            replications: 4,
            ..RmseConfig::default()
        };
        match run_rmse_experiment(&cfg, 0, 1) {
            Err(Error::AllReplicationsFailed { total, .. }) => assert_eq!(total, 4),
            other => panic!("expected total failure, got {other:?}"),
        }
    }

    #[test]
    fn misspec_report_has_all_twelve_arms() {
        let cfg = MisspecConfig {
            n: 400,
            cluster_size: 20,
            replications: 8,
            ..MisspecConfig::default()
        };
        let report = run_misspec_experiment(&cfg, 5, 2).unwrap();
        assert_eq!(report.arms.len(), 12);
        for spec in MISSPEC_SPECS {
            for est in ["plugin", "ipw", "dr"] {
                assert!(
                    report
                        .arms
                        .iter()
                        .any(|a| a.arm == format!("{spec}/{est}")),
                    "missing {spec}/{est}"
                );
            }
        }
        for arm in &report.arms {
            assert!(arm.value.is_finite() && arm.value >= 0.0);
            assert_eq!(arm.metric, "mse");
        }
        let one = run_misspec_experiment(&cfg, 5, 1).unwrap();
        assert_eq!(
            serde_json::to_string(&one).unwrap(),
            serde_json::to_string(&report).unwrap()
        );
    }

    #[test]
    fn omega_agreement_is_near_one_on_a_small_problem() {
        let cfg = OmegaAgreementConfig {
            n: 900,
            estimator_reps: 40,
            brute_force_reps: 200,
            ..OmegaAgreementConfig::default()
        };
        let report = run_omega_agreement(&cfg, 9, 2).unwrap();
        assert!(report.mean_omega_hat > 0.0);
        assert!(report.brute_force_omega > 0.0);
        assert!(
            report.ratio > 0.7 && report.ratio < 1.4,
            "ratio {}",
            report.ratio
        );
        assert!(report.omega_hat_se > 0.0);
    }

    #[test]
    fn zero_replications_is_rejected() {
        let cfg = CoverageConfig {
            replications: 0,
            ..small_coverage_config()
        };
        assert!(run_coverage_experiment(&cfg, 0, 1).is_err());
    }
}
