//! One function per subcommand. Each returns the text for stdout; writing
//! report files happens here so `main` stays a thin argument layer.

use std::path::{Path, PathBuf};

use clusterdr::simulation::experiments::{
    run_coverage_experiment, run_misspec_experiment, run_omega_agreement, run_rmse_experiment,
    ArmReport, CoverageConfig, MisspecConfig, MonteCarloReport, OmegaAgreementConfig, RmseConfig,
};
use clusterdr::simulation::omega::{omega_scaling_diagnostic, OmegaConfig, OmegaKind};
use clusterdr::{
    cluster_bootstrap, contribution_panel, cross_fit, estimate_dr, estimate_dr_sequential_detail,
    estimate_ipw, estimate_plugin, predict_panel, summarized_dataset, var_cluster_robust, var_iid,
    BootstrapConfig, BootstrapMode, BootstrapTarget, ClusteredDataset, EstimateReport,
    EstimatorKind, PredictionPanel, NuisanceMaps, VarianceMethod, VarianceReport,
};
use serde::Serialize;

use crate::config::{load_config, load_or_default, DgpSpec, EstimateConfig};
use crate::dataset_io::{emit, ingest, DatasetFile};
use crate::error::{CliError, Result};
use crate::report::{arm_line, curves_csv, write_text, Envelope};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum OutputFormat {
    Json,
    Csv,
}

/// Resolved global flags shared by every subcommand.
pub struct Context {
    pub config_path: Option<PathBuf>,
    pub data_path: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
    pub threads: usize,
    pub format: OutputFormat,
}

impl Context {
    fn require_config(&self, why: &str) -> Result<&Path> {
        self.config_path
            .as_deref()
            .ok_or_else(|| CliError::Usage(format!("--config is required {why}")))
    }

    fn require_data(&self) -> Result<&Path> {
        self.data_path
            .as_deref()
            .ok_or_else(|| CliError::Usage("--data is required".to_string()))
    }

    fn require_out(&self, why: &str) -> Result<&Path> {
        self.out_dir
            .as_deref()
            .ok_or_else(|| CliError::Usage(format!("--out is required {why}")))
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Output(format!("cannot create {}: {e}", dir.display())))
}

/// The `report` payload of `estimate` and `bootstrap`.
#[derive(Serialize)]
pub struct EstimateOutput {
    pub estimate: EstimateReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    pub variance_detail: Option<VarianceReport>,
}

fn lib<T>(r: clusterdr::Result<T>) -> Result<T> {
    r.map_err(CliError::from_lib)
}

fn point_estimate(
    kind: EstimatorKind,
    dataset: &ClusteredDataset,
    preds: &PredictionPanel,
) -> Result<EstimateReport> {
    lib(match kind {
        EstimatorKind::Plugin => estimate_plugin(dataset, preds),
        EstimatorKind::Ipw => estimate_ipw(dataset, preds),
        EstimatorKind::Dr | EstimatorKind::DrSequential => estimate_dr(dataset, preds),
    })
}

/// Point estimate plus the configured variance. `working` below is the
/// dataset the contributions are evaluated on: the input itself, or its
/// history-summarized transform for the sequential estimator.
pub fn compute_estimate(
    dataset: &ClusteredDataset,
    cfg: &EstimateConfig,
    seed: u64,
    threads: usize,
) -> Result<EstimateOutput> {
    let maps = NuisanceMaps {
        propensity: cfg.propensity_map.clone(),
        outcome: cfg.outcome_map.clone(),
    };
    let (working, preds, mut report) = match (cfg.estimator, &cfg.known_nuisances) {
        (EstimatorKind::DrSequential, Some(known)) => {
            let working = lib(summarized_dataset(dataset, &cfg.summary_or_default()))?;
            let fit = known.to_fit(cfg.clip_epsilon)?;
            let preds = lib(predict_panel(&working, &fit))?;
            let mut report = point_estimate(EstimatorKind::Dr, &working, &preds)?;
            report.estimator = EstimatorKind::DrSequential;
            (working, preds, report)
        }
        (EstimatorKind::DrSequential, None) => {
            let detail = lib(estimate_dr_sequential_detail(
                dataset,
                &cfg.summary_or_default(),
                &maps,
                cfg.folds,
                cfg.clip_epsilon,
                seed,
            ))?;
            (detail.summarized, detail.predictions, detail.report)
        }
        (kind, Some(known)) => {
            let fit = known.to_fit(cfg.clip_epsilon)?;
            let preds = lib(predict_panel(dataset, &fit))?;
            let report = point_estimate(kind, dataset, &preds)?;
            (dataset.clone(), preds, report)
        }
        (kind, None) => {
            let preds = lib(cross_fit(dataset, cfg.folds, &maps, cfg.clip_epsilon, seed))?;
            let report = point_estimate(kind, dataset, &preds)?;
            (dataset.clone(), preds, report)
        }
    };

    let variance_detail = match cfg.variance {
        VarianceMethod::None => None,
        VarianceMethod::Iid => {
            let panel = lib(contribution_panel(report.estimator, &working, &preds))?;
            Some(lib(var_iid(&panel, report.theta_hat))?)
        }
        VarianceMethod::ClusterRobust => {
            let panel = lib(contribution_panel(report.estimator, &working, &preds))?;
            Some(lib(var_cluster_robust(
                &working,
                &panel,
                report.theta_hat,
                cfg.small_sample_correction,
            ))?)
        }
        VarianceMethod::ClusterBootstrap => {
            let boot_cfg = BootstrapConfig {
                reps: cfg.bootstrap_reps,
                mode: cfg.bootstrap_mode,
                ci_level: cfg.ci_level,
                seed,
                threads,
            };
            let vr = match cfg.bootstrap_mode {
                BootstrapMode::FixedNuisances => {
                    let target = BootstrapTarget::Fixed {
                        kind: report.estimator,
                        predictions: &preds,
                    };
                    cluster_bootstrap(&working, &target, &boot_cfg)
                }
                // Refitting starts over from the raw dataset; the sequential
                // estimator re-summarizes inside each resample.
                BootstrapMode::RefitNuisances => {
                    let summary = (cfg.estimator == EstimatorKind::DrSequential)
                        .then(|| cfg.summary_or_default());
                    let target = BootstrapTarget::Refit {
                        kind: cfg.estimator,
                        maps: maps.clone(),
                        folds: cfg.folds,
                        clip_epsilon: cfg.clip_epsilon,
                        summary,
                    };
                    cluster_bootstrap(dataset, &target, &boot_cfg)
                }
            };
            Some(lib(vr)?)
        }
    };

    let mut warning = None;
    if let Some(vr) = &variance_detail {
        lib(report.attach_variance(vr, cfg.ci_level))?;
        if vr.degenerate {
            warning = Some(
                "variance estimate is not positive; reporting it as-is without an interval"
                    .to_string(),
            );
        }
    }
    Ok(EstimateOutput { estimate: report, warning, variance_detail })
}

fn variance_label(m: VarianceMethod) -> &'static str {
    match m {
        VarianceMethod::None => "none",
        VarianceMethod::Iid => "iid",
        VarianceMethod::ClusterRobust => "cluster_robust",
        VarianceMethod::ClusterBootstrap => "cluster_bootstrap",
    }
}

fn estimate_csv(out: &EstimateOutput) -> String {
    let e = &out.estimate;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let (lo, hi) = match e.ci {
        Some((lo, hi)) => (lo.to_string(), hi.to_string()),
        None => (String::new(), String::new()),
    };
    format!(
        "estimator,theta_hat,n,n_clusters,variance_method,variance,ci_level,ci_lower,ci_upper,degenerate_variance\n\
         {},{},{},{},{},{},{},{},{},{}\n",
        e.estimator,
        e.theta_hat,
        e.n,
        e.n_clusters,
        variance_label(e.variance_method),
        opt(e.variance),
        e.ci_level,
        lo,
        hi,
        e.degenerate_variance,
    )
}

fn run_estimate(ctx: &Context, command: &'static str) -> Result<String> {
    let file = ingest(ctx.require_data()?)?;
    let mut cfg: EstimateConfig = load_or_default(ctx.config_path.as_deref())?;
    if command == "bootstrap" {
        cfg.variance = VarianceMethod::ClusterBootstrap;
    }
    cfg.validate()?;
    if cfg.estimator == EstimatorKind::DrSequential && cfg.summary.is_none() {
        // Echo the summary actually used so the report is self-contained.
        cfg.summary = Some(cfg.summary_or_default());
    }
    let output = compute_estimate(&file.dataset, &cfg, ctx.seed, ctx.threads)?;
    if let Some(w) = &output.warning {
        eprintln!("warning: {w}");
    }
    let envelope = Envelope::new(command, ctx.seed, &cfg, &output);
    let json = envelope.to_json()?;
    if let Some(dir) = &ctx.out_dir {
        ensure_dir(dir)?;
        write_text(&dir.join(format!("{command}_report.json")), &json)?;
    }
    Ok(match ctx.format {
        OutputFormat::Json => json,
        OutputFormat::Csv => estimate_csv(&output),
    })
}

pub fn cmd_estimate(ctx: &Context) -> Result<String> {
    run_estimate(ctx, "estimate")
}

/// `estimate` with the variance method forced to the cluster bootstrap.
pub fn cmd_bootstrap(ctx: &Context) -> Result<String> {
    run_estimate(ctx, "bootstrap")
}

#[derive(Serialize)]
struct SimulateReport {
    truth: f64,
    oracle_mean: f64,
    n: usize,
    n_clusters: usize,
    n_observed: usize,
}

pub fn cmd_simulate(ctx: &Context) -> Result<String> {
    let spec = DgpSpec::load(ctx.require_config("to pick a generator")?)?;
    let out_dir = ctx.require_out("to receive dataset.csv")?;
    let data = spec.generate(ctx.seed)?;
    ensure_dir(out_dir)?;

    let n_observed = data
        .dataset
        .clusters()
        .iter()
        .flat_map(|c| c.members.iter())
        .filter(|m| m.r)
        .count();
    let report = SimulateReport {
        truth: data.truth,
        oracle_mean: data.oracle_outcomes.mean(),
        n: data.dataset.n(),
        n_clusters: data.dataset.n_clusters(),
        n_observed,
    };
    let file = DatasetFile {
        cluster_ids: (0..data.dataset.n_clusters()).map(|g| g.to_string()).collect(),
        dataset: data.dataset,
    };
    let csv_path = out_dir.join("dataset.csv");
    emit(&file, &csv_path)?;
    let envelope = Envelope::new("simulate", ctx.seed, &spec, &report);
    write_text(&out_dir.join("simulate_report.json"), &envelope.to_json()?)?;
    Ok(format!(
        "wrote {} individuals in {} clusters ({} observed) to {}",
        report.n,
        report.n_clusters,
        report.n_observed,
        csv_path.display()
    ))
}

/// Shared tail of the Monte Carlo commands: write the report and curve
/// files when an output directory is given, and return one line per arm.
fn finish_mc<C: Serialize>(
    command: &'static str,
    ctx: &Context,
    config: &C,
    report: &MonteCarloReport,
) -> Result<String> {
    let envelope = Envelope::new(command, ctx.seed, config, report);
    if let Some(dir) = &ctx.out_dir {
        ensure_dir(dir)?;
        let stem = command.replace('-', "_");
        write_text(&dir.join(format!("{stem}_report.json")), &envelope.to_json()?)?;
        write_text(&dir.join(format!("{stem}_curves.csv")), &curves_csv(&report.arms))?;
    }
    let lines: Vec<String> = report.arms.iter().map(arm_line).collect();
    Ok(lines.join("\n"))
}

pub fn cmd_mc_coverage(ctx: &Context) -> Result<String> {
    let cfg: CoverageConfig = load_or_default(ctx.config_path.as_deref())?;
    let report = lib(run_coverage_experiment(&cfg, ctx.seed, ctx.threads))?;
    finish_mc("mc-coverage", ctx, &cfg, &report)
}

pub fn cmd_mc_rmse(ctx: &Context) -> Result<String> {
    let cfg: RmseConfig = load_or_default(ctx.config_path.as_deref())?;
    let report = lib(run_rmse_experiment(&cfg, ctx.seed, ctx.threads))?;
    finish_mc("mc-rmse", ctx, &cfg, &report)
}

pub fn cmd_mc_misspec(ctx: &Context) -> Result<String> {
    let cfg: MisspecConfig = load_or_default(ctx.config_path.as_deref())?;
    let report = lib(run_misspec_experiment(&cfg, ctx.seed, ctx.threads))?;
    finish_mc("mc-misspec", ctx, &cfg, &report)
}

fn omega_kind_label(kind: OmegaKind) -> &'static str {
    match kind {
        OmegaKind::IidWithin => "iid_within",
        OmegaKind::PerfectCorrelation => "perfect_correlation",
        OmegaKind::InverseGap => "inverse_gap",
        OmegaKind::Heterogeneous => "heterogeneous",
    }
}

pub fn cmd_omega_diag(ctx: &Context) -> Result<String> {
    let cfg: OmegaConfig = load_config(ctx.require_config("to pick a covariance kind")?)?;
    let cfg = cfg.resolved();
    let report = lib(omega_scaling_diagnostic(&cfg, ctx.seed, ctx.threads))?;

    // Per grid point rows in the same shape the mc commands use.
    let arms: Vec<ArmReport> = report
        .n_grid
        .iter()
        .enumerate()
        .map(|(i, &n)| ArmReport {
            arm: omega_kind_label(report.kind).to_string(),
            x_value: n as f64,
            metric: "omega_hat".to_string(),
            value: report.omega_hat[i],
            mc_se: report.omega_se[i],
            replications_used: report.reps,
            failures: 0,
        })
        .collect();

    let envelope = Envelope::new("omega-diag", ctx.seed, &cfg, &report);
    if let Some(dir) = &ctx.out_dir {
        ensure_dir(dir)?;
        write_text(&dir.join("omega_diag_report.json"), &envelope.to_json()?)?;
        write_text(&dir.join("omega_diag_curves.csv"), &curves_csv(&arms))?;
    }
    let mut lines: Vec<String> = arms.iter().map(arm_line).collect();
    lines.push(format!(
        "slope={} slope_se={} intercept={} log_n_correlation={} covariance_clipped={}",
        report.slope,
        report.slope_se,
        report.intercept,
        report.log_n_correlation,
        report.covariance_clipped
    ));
    Ok(lines.join("\n"))
}

/// Brute-force agreement check for the cluster variance scale; exposed for
/// the test suites rather than as a subcommand.
pub fn omega_agreement(
    config: &OmegaAgreementConfig,
    seed: u64,
    threads: usize,
) -> Result<clusterdr::simulation::experiments::OmegaAgreementReport> {
    lib(run_omega_agreement(config, seed, threads))
}
