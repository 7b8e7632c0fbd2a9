//! Report serialization. Every command wraps its result in the same
//! envelope: schema version, the command name, the library version, the seed,
//! and the fully resolved config, so a report alone suffices to rerun the
//! analysis. Nothing time- or machine-dependent goes in (no timestamps, no
//! thread counts); reruns with equal inputs produce byte-identical files.

use std::path::Path;

use clusterdr::simulation::experiments::ArmReport;
use serde::Serialize;

use crate::error::{CliError, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
pub struct Envelope<C: Serialize, R: Serialize> {
    pub schema_version: u32,
    pub command: &'static str,
    pub library_version: &'static str,
    pub seed: u64,
    pub config: C,
    pub report: R,
}

impl<C: Serialize, R: Serialize> Envelope<C, R> {
    pub fn new(command: &'static str, seed: u64, config: C, report: R) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            command,
            library_version: clusterdr::LIBRARY_VERSION,
            seed,
            config,
            report,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Output(format!("cannot serialize report: {e}")))?;
        s.push('\n');
        Ok(s)
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)
        .map_err(|e| CliError::Output(format!("cannot write {}: {e}", path.display())))
}

/// One curve row per arm, floats in shortest round-trip form.
pub fn curves_csv(arms: &[ArmReport]) -> String {
    let mut out = String::from("arm,x_value,metric,value,mc_se\n");
    for a in arms {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            a.arm, a.x_value, a.metric, a.value, a.mc_se
        ));
    }
    out
}

/// The one-line-per-arm progress format printed to stdout.
pub fn arm_line(a: &ArmReport) -> String {
    format!(
        "{} x={} {}={} mc_se={} reps={} failures={}",
        a.arm, a.x_value, a.metric, a.value, a.mc_se, a.replications_used, a.failures
    )
}
