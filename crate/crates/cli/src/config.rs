//! Run configuration (JSON, `schema_version` 1). Every section rejects
//! unknown keys.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::ConfigError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: Option<u64>,
    pub replicates: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub find_cycle: Option<FindCycleConfig>,
    pub exit_times: Option<ExitTimesConfig>,
    pub neuro: Option<NeuroConfig>,
    pub fit: Option<FitConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FindCycleConfig {
    pub model: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    pub guess: Option<Vec<f64>>,
    pub grid_points: Option<usize>,
    pub dt: Option<f64>,
    /// Margin used in the stability report, `ρ(A) < 1 − ε`.
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitMode {
    Linear,
    Kesten,
    Full,
}

/// Explicit linearized map `ϱ_n = A(I + σBζ_n)ϱ_{n−1} + ση_n`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapConfig {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    /// Covariance of `(ζ, η)`, `ζ` first.
    pub cov: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExitTimesConfig {
    pub mode: ExitMode,
    /// Cycle artifact written by `find-cycle`.
    pub artifact: Option<PathBuf>,
    /// Builtin model analysed on the fly when no artifact is given.
    pub model: Option<String>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    /// Explicit map; linear and kesten modes only.
    pub map: Option<MapConfig>,
    pub sigma: Vec<f64>,
    pub h: Vec<f64>,
    pub epsilon: Option<f64>,
    #[serde(default = "default_max_steps")]
    pub max_steps: u64,
    /// Additive noise scale for the kesten mode (defaults to σ).
    pub delta: Option<f64>,
    /// Start of the hazard window; chosen from the data when absent.
    pub n0: Option<u64>,
    /// Euler–Maruyama step for the full mode, in rescaled time.
    pub dt: Option<f64>,
    #[serde(default = "default_min_at_risk")]
    pub min_at_risk: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuroConfig {
    pub model: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    pub sigma: Option<f64>,
    pub duration: f64,
    pub dt: Option<f64>,
    #[serde(default = "default_trace_stride")]
    pub trace_stride: usize,
    /// Stop once this many epochs are complete (0 runs the full duration).
    #[serde(default)]
    pub target_epochs: usize,
    #[serde(default = "default_min_at_risk")]
    pub min_at_risk: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    /// CSV with `tau` and `censored` columns (e.g. from `exit-times`).
    pub samples: PathBuf,
    pub n0: Option<u64>,
    #[serde(default = "default_min_at_risk")]
    pub min_at_risk: u64,
}

fn default_max_steps() -> u64 {
    100_000
}

fn default_min_at_risk() -> u64 {
    100
}

fn default_trace_stride() -> usize {
    100
}

pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
    let cfg: RunConfig =
        serde_json::from_str(text).map_err(|e| ConfigError(format!("invalid config: {e}")))?;
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(ConfigError(format!(
            "unsupported schema_version {} (expected {SCHEMA_VERSION})",
            cfg.schema_version
        )));
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(parse(r#"{"schema_version": 1, "bogus": 3}"#).is_err());
        assert!(parse(r#"{"schema_version": 1, "neuro": {"model": "hh_mmo", "duration": 1, "x": 0}}"#).is_err());
    }

    #[test]
    fn version_checked() {
        assert!(parse(r#"{"schema_version": 2}"#).is_err());
        assert!(parse(r#"{"seed": 1}"#).is_err());
        assert!(parse(r#"{"schema_version": 1}"#).is_ok());
    }
}
