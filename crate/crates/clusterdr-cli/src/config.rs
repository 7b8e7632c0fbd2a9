//! Config file loading. Every command that takes `--config` reads a JSON
//! document; missing fields fall back to defaults so a minimal file (or no
//! file at all) runs the standard analysis.

use std::path::Path;

use clusterdr::simulation::dgp::{
    gen_homogeneous, gen_quadratic, gen_sequential, GeneratedData, HomogeneousDgp, QuadraticDgp,
    SequentialDgp,
};
use clusterdr::{
    BootstrapMode, EstimatorKind, FeatureMap, GlmFit, Link, NuisanceFit, SummaryConfig,
    VarianceMethod,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Coefficients for a nuisance model supplied by the user instead of being
/// fitted. Coefficient order is (intercept, features...).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnownGlm {
    pub link: Link,
    pub feature_map: FeatureMap,
    pub coefficients: Vec<f64>,
}

impl KnownGlm {
    pub fn to_fit(&self) -> GlmFit {
        GlmFit::known(self.link, self.feature_map.clone(), self.coefficients.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnownNuisances {
    pub propensity: KnownGlm,
    pub outcome: KnownGlm,
}

impl KnownNuisances {
    pub fn to_fit(&self, clip_epsilon: f64) -> Result<NuisanceFit> {
        NuisanceFit::from_known(self.propensity.to_fit(), self.outcome.to_fit(), clip_epsilon)
            .map_err(CliError::from_lib)
    }
}

/// Everything `estimate` and `bootstrap` accept. The seed is deliberately
/// not part of the file; it comes from `--seed` so the same analysis file
/// can be replayed under different seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateConfig {
    pub estimator: EstimatorKind,
    pub propensity_map: FeatureMap,
    pub outcome_map: FeatureMap,
    /// History summary for the sequential estimator; ignored otherwise and
    /// rejected if set on a non-sequential run.
    pub summary: Option<SummaryConfig>,
    pub folds: usize,
    pub clip_epsilon: f64,
    pub variance: VarianceMethod,
    pub small_sample_correction: bool,
    pub ci_level: f64,
    pub bootstrap_reps: usize,
    pub bootstrap_mode: BootstrapMode,
    /// When present, skips nuisance fitting entirely.
    pub known_nuisances: Option<KnownNuisances>,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            estimator: EstimatorKind::Dr,
            propensity_map: FeatureMap::Linear,
            outcome_map: FeatureMap::Linear,
            summary: None,
            folds: 2,
            clip_epsilon: 0.01,
            variance: VarianceMethod::ClusterRobust,
            small_sample_correction: false,
            ci_level: 0.95,
            bootstrap_reps: 500,
            bootstrap_mode: BootstrapMode::FixedNuisances,
            known_nuisances: None,
        }
    }
}

impl EstimateConfig {
    /// Checks everything checkable without data so bad configs exit before
    /// any computation starts.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.folds < 2 {
            return bad(format!("folds must be at least 2, got {}", self.folds));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 0.5) {
            return bad(format!(
                "clip_epsilon must lie in (0, 0.5), got {}",
                self.clip_epsilon
            ));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return bad(format!("ci_level must lie in (0, 1), got {}", self.ci_level));
        }
        if self.variance == VarianceMethod::ClusterBootstrap && self.bootstrap_reps < 100 {
            return bad(format!(
                "bootstrap_reps must be at least 100, got {}",
                self.bootstrap_reps
            ));
        }
        if self.summary.is_some() && self.estimator != EstimatorKind::DrSequential {
            return bad(format!(
                "summary applies only to the dr_sequential estimator, not {}",
                self.estimator
            ));
        }
        if let Some(s) = &self.summary {
            if s.last_d_window && s.window_d == 0 {
                return bad("summary.window_d must be at least 1".to_string());
            }
        }
        if self.known_nuisances.is_some()
            && self.variance == VarianceMethod::ClusterBootstrap
            && self.bootstrap_mode == BootstrapMode::RefitNuisances
        {
            return bad(
                "refit_nuisances bootstrap refits models from data; it cannot be combined \
                 with known_nuisances"
                    .to_string(),
            );
        }
        if let Some(k) = &self.known_nuisances {
            if k.propensity.coefficients.is_empty() || k.outcome.coefficients.is_empty() {
                return bad("known nuisance coefficient vectors must be non-empty".to_string());
            }
        }
        Ok(())
    }

    /// The summary actually used by a sequential run.
    pub fn summary_or_default(&self) -> SummaryConfig {
        self.summary.clone().unwrap_or_default()
    }
}

/// Synthetic data request for `simulate`. The tag picks the generator, the
/// rest of the fields override its defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DgpSpec {
    Homogeneous {
        n: usize,
        #[serde(flatten)]
        dgp: HomogeneousDgp,
    },
    Sequential {
        n: usize,
        #[serde(flatten)]
        dgp: SequentialDgp,
    },
    Quadratic {
        n: usize,
        cluster_size: usize,
        #[serde(flatten)]
        dgp: QuadraticDgp,
    },
}

impl DgpSpec {
    /// Strict parse. `flatten` makes serde swallow unknown generator fields
    /// silently, so after deserializing we re-serialize and reject any input
    /// key the round trip did not keep.
    pub fn load(path: &Path) -> Result<Self> {
        let value: serde_json::Value = load_config(path)?;
        let spec: Self = serde_json::from_value(value.clone())
            .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))?;
        let echo = serde_json::to_value(&spec)
            .map_err(|e| CliError::Internal(clusterdr::Error::Internal { details: e.to_string() }))?;
        if let (Some(given), Some(known)) = (value.as_object(), echo.as_object()) {
            for key in given.keys() {
                if !known.contains_key(key) {
                    return Err(CliError::Config(format!(
                        "invalid config {}: unknown field `{key}` for generator kind `{}`",
                        path.display(),
                        given.get("kind").and_then(|k| k.as_str()).unwrap_or("?"),
                    )));
                }
            }
        }
        Ok(spec)
    }

    pub fn generate(&self, seed: u64) -> Result<GeneratedData> {
        let out = match self {
            DgpSpec::Homogeneous { n, dgp } => gen_homogeneous(dgp, *n, seed),
            DgpSpec::Sequential { n, dgp } => gen_sequential(dgp, *n, seed),
            DgpSpec::Quadratic { n, cluster_size, dgp } => {
                gen_quadratic(dgp, *n, *cluster_size, seed)
            }
        };
        out.map_err(|e| match e {
            clusterdr::Error::Internal { .. } => CliError::Internal(e),
            other => CliError::Config(format!("{other}")),
        })
    }
}

pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
}

/// Commands with sensible zero-config behavior take the path optionally.
pub fn load_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => load_config(p),
        None => Ok(T::default()),
    }
}
