//! Run configuration: a TOML file with defaults for everything but the
//! corpus manifest, plus the frozen effective copy kept in each run
//! directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::builder::Quotas;
use crate::evalharness::{Averaging, DEFAULT_ABORT_FRACTION};
use crate::modelgw::{parse_roster, BackendConfig, GatewayError};


#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Roster(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveConfig {
    pub stride: usize,
    pub n_anchors: usize,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self {
            stride: 10,
            n_anchors: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Corpus manifest; the one field without a default.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub seed: u64,
    pub factor: usize,
    pub out_dir: PathBuf,
    pub averaging: Averaging,
    /// Worker pool size; per-backend limits still apply.
    pub parallelism: usize,
    pub abort_fraction: f64,
    /// Backend id used to write reasoning paths for the CoT stage.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub annotator: Option<String>,
    /// JSONL file of pre-authored reasoning paths.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cot_paths: Option<PathBuf>,
    /// Directory with template overrides.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub templates_dir: Option<PathBuf>,
    /// JSON roster file merged after inline `[[backends]]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub roster: Option<PathBuf>,
    pub quotas: Quotas,
    pub curve: CurveConfig,
    pub backends: Vec<BackendConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            seed: 0,
            factor: 10,
            out_dir: PathBuf::from("runs/default"),
            averaging: Averaging::Macro,
            parallelism: 4,
            abort_fraction: DEFAULT_ABORT_FRACTION,
            annotator: None,
            cot_paths: None,
            templates_dir: None,
            roster: None,
            quotas: Quotas::default(),
            curve: CurveConfig::default(),
            backends: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.factor == 0 {
            return Err(ConfigError::Invalid("factor must be >= 1".into()));
        }
        if self.parallelism == 0 {
            return Err(ConfigError::Invalid("parallelism must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.abort_fraction) {
            return Err(ConfigError::Invalid("abort_fraction must be within [0, 1]".into()));
        }
        if self.curve.stride == 0 || self.curve.n_anchors == 0 {
            return Err(ConfigError::Invalid("curve stride and n_anchors must be >= 1".into()));
        }
        Ok(())
    }

    /// Inline backends followed by the roster file's entries; ids must be
    /// unique across both.
    pub fn roster_entries(&self) -> Result<Vec<BackendConfig>, ConfigError> {
        let mut all = self.backends.clone();
        if let Some(p) = &self.roster {
            let text = fs::read_to_string(p).map_err(|source| ConfigError::Io {
                path: p.clone(),
                source,
            })?;
            all.extend(parse_roster(&text)?);
        }
        let mut seen = std::collections::HashSet::new();
        for b in &all {
            if !seen.insert(b.id.clone()) {
                return Err(ConfigError::Invalid(format!("duplicate backend id `{}`", b.id)));
            }
        }
        Ok(all)
    }

    /// Roster entry by id, falling back to the built-in reference policies.
    pub fn backend(&self, id: &str) -> Result<BackendConfig, ConfigError> {
        self.roster_entries()?
            .into_iter()
            .find(|b| b.id == id)
            .or_else(|| BackendConfig::builtin(id))
            .ok_or_else(|| ConfigError::Invalid(format!("unknown backend `{id}`")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    /// Writes the effective configuration to `dir/config.<label>.toml`.
    pub fn freeze(&self, dir: &Path, label: &str) -> Result<PathBuf, ConfigError> {
        let p = dir.join(format!("config.{label}.toml"));
        fs::write(&p, self.to_toml()).map_err(|source| ConfigError::Io {
            path: p.clone(),
            source,
        })?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_everything_but_manifest() {
        let c = RunConfig::from_toml("", Path::new("x.toml")).unwrap();
        assert_eq!(c.factor, 10);
        assert_eq!(c.manifest, None);
        assert_eq!(c.averaging, Averaging::Macro);
        assert_eq!(c.abort_fraction, 0.2);
        c.validate().unwrap();
    }

    #[test]
    fn frozen_config_round_trips() {
        let text = r#"
manifest = "corpus/manifest.json"
seed = 7
averaging = "sample_weighted"

[quotas]
short_per_bin = 3
cot_per_bin = 1
long_per_window = 5

[[backends]]
id = "bias"
kind = "policy"
policy = "chrono_bias_sim"
p = 0.8
"#;
        let c = RunConfig::from_toml(text, Path::new("x.toml")).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.quotas.long_per_window, 5);
        let back = RunConfig::from_toml(&c.to_toml(), Path::new("frozen")).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.backend("bias").unwrap().p, Some(0.8));
        assert_eq!(c.backend("oracle").unwrap().policy.as_deref(), Some("oracle"));
        assert!(c.backend("nope").is_err());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::from_toml("sed = 1", Path::new("x")).is_err());
        let c = RunConfig { factor: 0, ..RunConfig::default() };
        assert!(c.validate().is_err());
    }
}
