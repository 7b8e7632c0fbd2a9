//! Synthetic data generating processes and the Monte Carlo harness built on
//! them: coverage studies, error-versus-sample-size studies, nuisance
//! misspecification grids, and scaling diagnostics for the cluster-robust
//! variance statistic.

pub mod dgp;
pub mod experiments;
pub mod omega;

pub use dgp::{
    gen_homogeneous, gen_quadratic, gen_sequential, GeneratedData, HomogeneousDgp, QuadraticDgp,
    SequentialDgp,
};
pub use experiments::{
    run_coverage_experiment, run_misspec_experiment, run_omega_agreement, run_rmse_experiment,
    ArmReport, CoverageConfig, MisspecConfig, MonteCarloReport, OmegaAgreementConfig,
    OmegaAgreementReport, RmseConfig,
};
pub use omega::{omega_scaling_diagnostic, OmegaConfig, OmegaDiagReport, OmegaKind};
