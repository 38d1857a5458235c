//! Run configuration: a versioned JSON document plus command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use isnet_core::{EstimateOptions, EstimationMode, NetworkParams};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Inline network parameters; exclusive with `params_path`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<NetworkParams>,
    /// Parameters file, relative to the configuration file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params_path: Option<PathBuf>,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default = "default_mode")]
    pub mode: EstimationMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burnin: Option<f64>,
    #[serde(default)]
    pub keep_true_counts: bool,
    #[serde(default)]
    pub estimator: EstimateOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

fn default_beta() -> f64 {
    5.0
}

fn default_m() -> usize {
    250_000
}

fn default_replications() -> usize {
    30
}

fn default_mode() -> EstimationMode {
    EstimationMode::KnownServices
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            params: None,
            params_path: None,
            beta: default_beta(),
            m: default_m(),
            replications: default_replications(),
            mode: default_mode(),
            seed: 0,
            burnin: None,
            keep_true_counts: false,
            estimator: EstimateOptions::default(),
            out: None,
        }
    }
}

/// Values given on the command line; each replaces the configured one.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub m: Option<usize>,
    pub replications: Option<usize>,
    pub beta: Option<f64>,
    pub mode: Option<EstimationMode>,
    pub burnin: Option<f64>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Parses `path`, loads a referenced parameters file and checks the
    /// scalar fields.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Parses a configuration document; `base` resolves relative paths.
    pub fn parse(text: &str, base: &Path) -> CliResult<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("schema_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(SCHEMA_VERSION) => {}
            Some(v) => {
                return Err(CliError::Config(format!(
                    "unsupported schema_version {v} (expected {SCHEMA_VERSION})"
                )))
            }
            None => return Err(CliError::config("missing schema_version")),
        }
        let mut cfg: RunConfig = serde_json::from_value(value)?;
        if let Some(rel) = cfg.params_path.take() {
            if cfg.params.is_some() {
                return Err(CliError::config("give either params or params_path, not both"));
            }
            let path = base.join(rel);
            let text = fs::read_to_string(&path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            cfg.params = Some(NetworkParams::from_json(&text).map_err(CliError::config)?);
            cfg.params_path = Some(path);
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> CliResult<()> {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.m {
            self.m = v;
        }
        if let Some(v) = o.replications {
            self.replications = v;
        }
        if let Some(v) = o.beta {
            self.beta = v;
        }
        if let Some(v) = o.mode {
            self.mode = v;
        }
        if o.burnin.is_some() {
            self.burnin = o.burnin;
        }
        if o.out.is_some() {
            self.out = o.out.clone();
        }
        self.check()
    }

    fn check(&self) -> CliResult<()> {
        if self.m < 2 {
            return Err(CliError::Config(format!("m must be at least 2, got {}", self.m)));
        }
        if self.replications < 1 {
            return Err(CliError::config("R must be at least 1"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(CliError::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if let Some(t) = self.burnin {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(CliError::Config(format!("burnin must be nonnegative, got {t}")));
            }
        }
        if let Some(p) = &self.params {
            if p.n() == 0 {
                return Err(CliError::config("the network has no stations"));
            }
        }
        Ok(())
    }

    pub fn params(&self) -> CliResult<&NetworkParams> {
        self.params
            .as_ref()
            .ok_or_else(|| CliError::config("the configuration has no params"))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use isnet_core::model::presets::{self, Topology};

    fn doc(params: &NetworkParams) -> String {
        format!(
            r#"{{"schema_version": 1, "params": {}, "beta": 2.5, "m": 100}}"#,
            params.to_json().unwrap()
        )
    }

    #[test]
    fn inline_params_and_defaults() {
        let params = presets::experiment1(Topology::Line);
        let cfg = RunConfig::parse(&doc(&params), Path::new(".")).unwrap();
        assert_eq!(cfg.params.as_ref(), Some(&params));
        assert_eq!(cfg.beta, 2.5);
        assert_eq!(cfg.m, 100);
        assert_eq!(cfg.replications, 30);
        assert_eq!(cfg.mode, EstimationMode::KnownServices);
    }

    #[test]
    fn params_file_is_resolved_against_the_config_directory() {
        let dir = tempfile::tempdir().unwrap();
        let params = presets::experiment1(Topology::Circle);
        fs::write(dir.path().join("net.json"), params.to_json().unwrap()).unwrap();
        let cfg_path = dir.path().join("run.json");
        fs::write(&cfg_path, r#"{"schema_version": 1, "params_path": "net.json"}"#).unwrap();
        let cfg = RunConfig::load(&cfg_path).unwrap();
        assert_eq!(cfg.params, Some(params));
    }

    #[test]
    fn rejects_bad_documents() {
        let base = Path::new(".");
        for text in [
            r#"{"m": 10}"#,
            r#"{"schema_version": 2}"#,
            r#"{"schema_version": 1, "m": 1}"#,
            r#"{"schema_version": 1, "replications": 0}"#,
            r#"{"schema_version": 1, "beta": -1}"#,
            r#"{"schema_version": 1, "params_path": "does/not/exist.json"}"#,
            r#"{"schema_version": 1, "unknown_field": 3}"#,
        ] {
            let err = RunConfig::parse(text, base).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}");
        }
    }

    #[test]
    fn overrides_replace_and_revalidate() {
        let mut cfg = RunConfig::default();
        cfg.apply(&Overrides {
            seed: Some(9),
            m: Some(50),
            mode: Some(EstimationMode::ModelFree),
            ..Default::default()
        })
        .unwrap();
        assert_eq!((cfg.seed, cfg.m, cfg.mode), (9, 50, EstimationMode::ModelFree));
        assert!(cfg
            .apply(&Overrides {
                m: Some(1),
                ..Default::default()
            })
            .is_err());
    }
}
