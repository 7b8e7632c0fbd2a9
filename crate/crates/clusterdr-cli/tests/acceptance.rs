//! Acceptance gate for the project. One test per numbered criterion; each
//! prints a single `criterion N: PASS/FAIL` line with the measured values
//! (shown under --nocapture, or in the failure output) and then asserts.
//!
//! Every Monte Carlo experiment is executed twice, at 1 and at 8 worker
//! threads, through the shared stores below; the substantive criteria read
//! the 8-thread result and criterion 9 checks the two serializations are
//! byte-identical.

use std::sync::OnceLock;
use std::time::Instant;

use clusterdr::simulation::dgp::{
    gen_homogeneous, gen_quadratic, gen_sequential, GeneratedData, HomogeneousDgp, QuadraticDgp,
    SequentialDgp,
};
use clusterdr::simulation::experiments::{
    run_coverage_experiment, run_misspec_experiment, run_omega_agreement, run_rmse_experiment,
    CoverageConfig, MisspecConfig, MonteCarloReport, OmegaAgreementConfig, OmegaAgreementReport,
    RmseConfig,
};
use clusterdr::simulation::omega::{
    omega_scaling_diagnostic, OmegaConfig, OmegaDiagReport, OmegaKind,
};
use clusterdr::{
    estimate_dr, observed_mean, var_cluster_robust, var_iid, wald_ci, Cluster, ClusterPanel,
    ClusteredDataset, IndividualRecord, PredictionPanel,
};

/// One experiment computed at two thread counts. `report` is the 8-thread
/// run; both serializations are retained for the determinism criterion.
struct Pair<R> {
    report: R,
    bytes_one_thread: String,
    bytes_eight_threads: String,
}

fn pair<R: serde::Serialize>(run: impl Fn(usize) -> R) -> Pair<R> {
    let eight = run(8);
    let one = run(1);
    Pair {
        bytes_one_thread: serde_json::to_string(&one).unwrap(),
        bytes_eight_threads: serde_json::to_string(&eight).unwrap(),
        report: eight,
    }
}

fn misspec_table1() -> &'static Pair<MonteCarloReport> {
    static S: OnceLock<Pair<MonteCarloReport>> = OnceLock::new();
    S.get_or_init(|| {
        pair(|t| run_misspec_experiment(&MisspecConfig::default(), 161, t).unwrap())
    })
}

fn misspec_table2() -> &'static Pair<MonteCarloReport> {
    static S: OnceLock<Pair<MonteCarloReport>> = OnceLock::new();
    S.get_or_init(|| {
        let cfg = MisspecConfig {
            cluster_size: 10,
            ..MisspecConfig::default()
        };
        pair(move |t| run_misspec_experiment(&cfg, 162, t).unwrap())
    })
}

fn misspec_table3() -> &'static Pair<MonteCarloReport> {
    static S: OnceLock<Pair<MonteCarloReport>> = OnceLock::new();
    S.get_or_init(|| {
        let cfg = MisspecConfig {
            n: 1000,
            cluster_size: 31,
            ..MisspecConfig::default()
        };
        pair(move |t| run_misspec_experiment(&cfg, 163, t).unwrap())
    })
}

fn coverage() -> &'static Pair<MonteCarloReport> {
    static S: OnceLock<Pair<MonteCarloReport>> = OnceLock::new();
    S.get_or_init(|| pair(|t| run_coverage_experiment(&CoverageConfig::default(), 192, t).unwrap()))
}

fn rmse() -> &'static Pair<MonteCarloReport> {
    static S: OnceLock<Pair<MonteCarloReport>> = OnceLock::new();
    S.get_or_init(|| {
        let cfg = RmseConfig {
            n_grid: vec![4000, 8000],
            ..RmseConfig::default()
        };
        pair(move |t| run_rmse_experiment(&cfg, 224, t).unwrap())
    })
}

fn omega_agreement() -> &'static Pair<OmegaAgreementReport> {
    static S: OnceLock<Pair<OmegaAgreementReport>> = OnceLock::new();
    S.get_or_init(|| {
        let cfg = OmegaAgreementConfig {
            dgp: HomogeneousDgp::with_alpha(0.3),
            ..OmegaAgreementConfig::default()
        };
        pair(move |t| run_omega_agreement(&cfg, 90, t).unwrap())
    })
}

fn omega_diag(kind: OmegaKind) -> Pair<OmegaDiagReport> {
    let cfg = OmegaConfig::defaults_for(kind);
    pair(move |t| omega_scaling_diagnostic(&cfg, 208, t).unwrap())
}

fn omega_diags() -> &'static Vec<Pair<OmegaDiagReport>> {
    static S: OnceLock<Vec<Pair<OmegaDiagReport>>> = OnceLock::new();
    S.get_or_init(|| {
        [
            OmegaKind::IidWithin,
            OmegaKind::PerfectCorrelation,
            OmegaKind::InverseGap,
            OmegaKind::Heterogeneous,
        ]
        .into_iter()
        .map(omega_diag)
        .collect()
    })
}

fn arm(report: &MonteCarloReport, name: &str) -> f64 {
    report
        .arms
        .iter()
        .find(|a| a.arm == name)
        .unwrap_or_else(|| panic!("no arm named {name}"))
        .value
}

fn arm_at(report: &MonteCarloReport, name: &str, x: f64) -> f64 {
    report
        .arms
        .iter()
        .find(|a| a.arm == name && a.x_value == x)
        .unwrap_or_else(|| panic!("no arm {name} at x={x}"))
        .value
}

/// Print the one-line verdict and surface it in the assertion message too.
fn conclude(name: &str, pass: bool, details: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("criterion {name}: {tag} — {details}");
    assert!(pass, "criterion {name}: {tag} — {details}");
}

#[test]
fn criterion_1_quadratic_design_error_bands() {
    let started = Instant::now();
    let r = &misspec_table1().report;
    let dr_both = arm(r, "mu_correct_pi_correct/dr");
    let dr_pi_wrong = arm(r, "mu_correct_pi_wrong/dr");
    let plugin_mu_wrong = arm(r, "mu_wrong_pi_correct/plugin");
    let ipw_pi_wrong = arm(r, "mu_correct_pi_wrong/ipw");

    let checks = [
        (0.03..=0.09).contains(&dr_both),
        (dr_pi_wrong / dr_both - 1.0).abs() <= 0.25,
        (1.6..=2.6).contains(&plugin_mu_wrong),
        (2.0..=3.5).contains(&ipw_pi_wrong),
    ];
    conclude(
        "1",
        checks.iter().all(|&c| c),
        &format!(
            "mse(dr,both)={dr_both:.4} in [0.03,0.09]; mse(dr,pi wrong)={dr_pi_wrong:.4} \
             within 25% of both-correct; mse(plugin,mu wrong)={plugin_mu_wrong:.4} in \
             [1.6,2.6]; mse(ipw,pi wrong)={ipw_pi_wrong:.4} in [2.0,3.5]; {:.0}s",
            started.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_2_small_cluster_orderings() {
    let started = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for (label, r) in [
        ("(n=10000,m=10)", &misspec_table2().report),
        ("(n=1000,m=31)", &misspec_table3().report),
    ] {
        let ipw_ratio = arm(r, "mu_correct_pi_wrong/ipw") / arm(r, "mu_correct_pi_wrong/dr");
        let plugin_ratio = arm(r, "mu_wrong_pi_correct/plugin") / arm(r, "mu_wrong_pi_correct/dr");
        let worst_both_wrong = ["plugin", "ipw", "dr"]
            .iter()
            .map(|e| arm(r, &format!("mu_wrong_pi_wrong/{e}")))
            .fold(f64::INFINITY, f64::min);
        pass &= ipw_ratio >= 10.0 && plugin_ratio >= 10.0 && worst_both_wrong > 1.0;
        parts.push(format!(
            "{label} dr-advantage pi-wrong {ipw_ratio:.1}x, mu-wrong {plugin_ratio:.1}x \
             (need >=10x), min both-wrong mse {worst_both_wrong:.2} (need >1)"
        ));
    }
    parts.push(format!("{:.0}s", started.elapsed().as_secs_f64()));
    conclude("2", pass, &parts.join("; "));
}

#[test]
fn criterion_3_interval_coverage() {
    let started = Instant::now();
    let r = &coverage().report;
    let cr_02 = arm(r, "alpha=0.2/cluster_robust");
    let cr_04 = arm(r, "alpha=0.4/cluster_robust");
    let iid_04 = arm(r, "alpha=0.4/iid");
    let pass = (0.92..=0.97).contains(&cr_02)
        && (0.92..=0.97).contains(&cr_04)
        && iid_04 <= 0.90;
    conclude(
        "3",
        pass,
        &format!(
            "cluster-robust coverage {cr_02:.3} (alpha=0.2) and {cr_04:.3} (alpha=0.4) in \
             [0.92,0.97]; iid coverage {iid_04:.3} <= 0.90 at alpha=0.4; {:.0}s",
            started.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_4_history_summary_accuracy() {
    let started = Instant::now();
    let r = &rmse().report;
    let mut pass = true;
    let mut parts = Vec::new();
    for n in [4000.0, 8000.0] {
        let h = arm_at(r, "history_summary", n);
        let c = arm_at(r, "current_only", n);
        let u = arm_at(r, "unadjusted", n);
        pass &= h < c && h < u;
        parts.push(format!("n={n}: history {h:.3} < current {c:.3}, unadjusted {u:.3}"));
    }
    let decreasing = arm_at(r, "history_summary", 8000.0) < arm_at(r, "history_summary", 4000.0);
    pass &= decreasing;
    parts.push(format!(
        "history rmse decreasing in n: {decreasing}; {:.0}s",
        started.elapsed().as_secs_f64()
    ));
    conclude("4", pass, &parts.join("; "));
}

#[test]
fn criterion_5_variance_statistic_agreement() {
    let started = Instant::now();
    let r = &omega_agreement().report;
    let pass = (r.ratio - 1.0).abs() <= 0.10;
    conclude(
        "5",
        pass,
        &format!(
            "mean omega {:.4} over {} replications vs brute force {:.4} from {} datasets, \
             ratio {:.3} within 10%; {:.0}s",
            r.mean_omega_hat,
            r.estimator_reps,
            r.brute_force_omega,
            r.brute_force_reps,
            r.ratio,
            started.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_6_variance_growth_slopes() {
    let started = Instant::now();
    let ds = omega_diags();
    let iid = &ds[0].report;
    let perfect = &ds[1].report;
    let gap = &ds[2].report;
    let het = &ds[3].report;
    let pass = iid.slope.abs() <= 0.05
        && (perfect.slope - perfect.alpha).abs() <= 0.05
        && (het.slope - het.alpha).abs() <= 0.05
        && gap.log_n_correlation > 0.98;
    conclude(
        "6",
        pass,
        &format!(
            "slopes iid {:.3} (target 0), perfect {:.3} and heterogeneous {:.3} (target \
             alpha=0.5), all within 0.05; inverse-gap corr(omega, log n)={:.4} > 0.98 \
             (covariance clipped: {}); {:.0}s",
            iid.slope,
            perfect.slope,
            het.slope,
            gap.log_n_correlation,
            gap.covariance_clipped,
            started.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_7_exact_identities() {
    let started = Instant::now();

    // Fully observed data with pi pinned at 1 and mu at 0: the doubly
    // robust estimate is exactly the sample mean. Values are binary
    // fractions so every sum is exact.
    let obs = |w: f64, y: f64, t: usize| IndividualRecord::observed(vec![w], y, t);
    let d = ClusteredDataset::new(vec![
        Cluster { x: vec![0.5], members: vec![obs(0.25, 1.0, 0), obs(-1.0, 3.0, 1)] },
        Cluster { x: vec![-0.25], members: vec![obs(0.5, 0.25, 0)] },
        Cluster { x: vec![2.0], members: vec![obs(1.0, -0.5, 0), obs(0.0, 2.0, 1), obs(-0.5, 4.0, 2)] },
    ])
    .unwrap();
    let preds = PredictionPanel {
        pi_hat: ClusterPanel::from_values(
            d.cluster_sizes().iter().map(|&s| vec![1.0; s]).collect(),
        ),
        mu_hat: ClusterPanel::zeros_like(&d),
    };
    let dr = estimate_dr(&d, &preds).unwrap().theta_hat;
    let mean = observed_mean(&d).unwrap();
    let dr_is_mean = dr == 1.625 && mean == 1.625;

    // Singleton clusters: the cluster variance equals (n-1)/n times the
    // iid sample variance.
    let singles = ClusteredDataset::new(vec![
        Cluster { x: vec![0.0], members: vec![obs(0.0, 0.0, 0)] },
        Cluster { x: vec![1.0], members: vec![obs(0.0, 2.0, 0)] },
    ])
    .unwrap();
    let phi = ClusterPanel::from_values(vec![vec![0.0], vec![2.0]]);
    let vc = var_cluster_robust(&singles, &phi, 1.0, false).unwrap();
    let vi = var_iid(&phi, 1.0).unwrap();
    let size_one_reduction = vc.estimate_variance == 0.5 * vi.estimate_variance;

    // Hand example: cluster sums {0, 3} with sizes {2, 1} and theta 1 give
    // omega (0 + 9)/3 - (4 + 1)/3 = 4/3 and variance 4/9.
    let two_one = ClusteredDataset::new(vec![
        Cluster { x: vec![0.0], members: vec![obs(0.0, 0.0, 0), obs(0.0, 0.0, 1)] },
        Cluster { x: vec![1.0], members: vec![obs(0.0, 3.0, 0)] },
    ])
    .unwrap();
    let hand = var_cluster_robust(
        &two_one,
        &ClusterPanel::from_values(vec![vec![0.0, 0.0], vec![3.0]]),
        1.0,
        false,
    )
    .unwrap();
    let hand_ok = (hand.omega_hat.unwrap() - 4.0 / 3.0).abs() < 1e-15
        && (hand.estimate_variance - 4.0 / 9.0).abs() < 1e-15
        && !hand.degenerate;

    // Constant contributions: omega exactly zero and flagged degenerate.
    let constant = var_cluster_robust(
        &two_one,
        &ClusterPanel::from_values(vec![vec![2.0, 2.0], vec![2.0]]),
        2.0,
        false,
    )
    .unwrap();
    let constant_ok = constant.omega_hat == Some(0.0) && constant.degenerate;

    // Two-sided 95% normal quantile.
    let (_, hi) = wald_ci(0.0, 1.0, 0.95).unwrap();
    let quantile_ok = (hi - 1.95996).abs() <= 1e-5;

    // Canonical file survives an ingest/emit round trip byte for byte.
    let canonical = "# schema_version: 1\n\
                     cluster_id,time_index,x_0,w_0,r,y\n\
                     a,0,0.5,1,1,2\n\
                     a,1,0.5,-1,0,\n\
                     b,0,-0.25,0.125,1,-3.5\n";
    let tmp = tempfile::NamedTempFile::new().unwrap();
    std::fs::write(tmp.path(), canonical).unwrap();
    let round_trip =
        clusterdr_cli::dataset_io::render(&clusterdr_cli::dataset_io::ingest(tmp.path()).unwrap())
            == canonical;

    let elapsed = started.elapsed().as_secs_f64();
    let pass = dr_is_mean
        && size_one_reduction
        && hand_ok
        && constant_ok
        && quantile_ok
        && round_trip
        && elapsed < 1.0;
    conclude(
        "7",
        pass,
        &format!(
            "dr equals sample mean 1.625: {dr_is_mean}; size-1 reduction exact: \
             {size_one_reduction}; hand example omega=4/3 var=4/9: {hand_ok}; constant \
             panel degenerate at 0: {constant_ok}; wald quantile {hi:.6} within 1e-5 of \
             1.95996: {quantile_ok}; ingest/emit round trip: {round_trip}; {elapsed:.3}s < 1s"
        ),
    );
}

/// Mean and its standard error from independent cluster sums.
fn clustered_mean_se(panel: &ClusterPanel) -> (f64, f64) {
    let n: usize = panel.clusters().iter().map(Vec::len).sum();
    let mean = panel.mean();
    let mut ss = 0.0;
    for cluster in panel.clusters() {
        let t: f64 = cluster.iter().sum();
        let dev = t - cluster.len() as f64 * mean;
        ss += dev * dev;
    }
    (mean, ss.sqrt() / n as f64)
}

#[test]
fn criterion_8_generator_ground_truth() {
    let started = Instant::now();
    let n = 1_000_000;
    let cases: [(&str, GeneratedData); 3] = [
        ("homogeneous", gen_homogeneous(&HomogeneousDgp::default(), n, 881).unwrap()),
        ("sequential", gen_sequential(&SequentialDgp::default(), n, 882).unwrap()),
        ("quadratic", gen_quadratic(&QuadraticDgp::default(), n, 100, 883).unwrap()),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (label, data) in &cases {
        let (mean, se) = clustered_mean_se(&data.oracle_outcomes);
        let z = (mean - data.truth) / se;
        pass &= z.abs() <= 3.0;
        parts.push(format!(
            "{label}: oracle mean {mean:.4} vs truth {} ({z:+.2} se)",
            data.truth
        ));
    }
    parts.push(format!("{:.0}s", started.elapsed().as_secs_f64()));
    conclude("8", pass, &parts.join("; "));
}

#[test]
fn criterion_9_thread_count_determinism() {
    let started = Instant::now();
    let mut pairs: Vec<(&str, &String, &String)> = vec![
        ("misspec table 1", &misspec_table1().bytes_one_thread, &misspec_table1().bytes_eight_threads),
        ("misspec table 2", &misspec_table2().bytes_one_thread, &misspec_table2().bytes_eight_threads),
        ("misspec table 3", &misspec_table3().bytes_one_thread, &misspec_table3().bytes_eight_threads),
        ("coverage", &coverage().bytes_one_thread, &coverage().bytes_eight_threads),
        ("rmse", &rmse().bytes_one_thread, &rmse().bytes_eight_threads),
        ("omega agreement", &omega_agreement().bytes_one_thread, &omega_agreement().bytes_eight_threads),
    ];
    let kind_names = ["iid_within", "perfect_correlation", "inverse_gap", "heterogeneous"];
    for (i, p) in omega_diags().iter().enumerate() {
        pairs.push((kind_names[i], &p.bytes_one_thread, &p.bytes_eight_threads));
    }
    let mismatched: Vec<&str> = pairs
        .iter()
        .filter(|(_, one, eight)| one != eight)
        .map(|(name, _, _)| *name)
        .collect();
    conclude(
        "9",
        mismatched.is_empty(),
        &format!(
            "{} of {} reports byte-identical at 1 and 8 threads{}; {:.0}s",
            pairs.len() - mismatched.len(),
            pairs.len(),
            if mismatched.is_empty() {
                String::new()
            } else {
                format!(" (mismatched: {})", mismatched.join(", "))
            },
            started.elapsed().as_secs_f64()
        ),
    );
}
