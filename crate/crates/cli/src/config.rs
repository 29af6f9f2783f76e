//! Run configuration with flat dotted keys.
//!
//! The file is a single JSON object such as `{"model.F": 32, "md.steps": 5000}`.
//! Keys are resolved against the defaults below; unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use leignn::analysis::{MsdConfig, RdfConfig};
use leignn::io::{DatasetConfig, OraclePotential};
use leignn::md::MdConfig;
use leignn::model::Hyperparams;
use leignn::training::TrainConfig;
use leignn::derive_seed;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Keys whose values are whole JSON objects rather than further flattened.
const LEAVES: &[&str] = &["potential"];

/// Per-subsystem seeds; always derived from the root `seed`.
const DERIVED_SEEDS: &[(&str, &str)] = &[("data.seed", "data"), ("train.seed", "train"), ("md.seed", "md")];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Model,
    Oracle,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProviderSection {
    pub kind: ProviderKind,
    /// Standard deviation of the random provider's force components (eV/Å).
    pub random_scale: f64,
}

impl Default for ProviderSection {
    fn default() -> Self {
        ProviderSection {
            kind: ProviderKind::Model,
            random_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub rdf: RdfConfig,
    pub msd: MsdConfig,
    /// Stability window (fs).
    pub window: f64,
    /// Stability threshold on the windowed RDF MAE.
    pub threshold: f64,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            rdf: RdfConfig::default(),
            msd: MsdConfig::default(),
            window: 1000.0,
            threshold: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every subsystem seed is derived from it.
    pub seed: u64,
    pub potential: OraclePotential,
    pub data: DatasetConfig,
    pub model: Hyperparams,
    pub train: TrainConfig,
    pub md: MdConfig,
    pub provider: ProviderSection,
    pub analysis: AnalysisSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            potential: OraclePotential::argon(),
            data: DatasetConfig::default(),
            model: Hyperparams::default(),
            train: TrainConfig::default(),
            md: MdConfig::default(),
            provider: ProviderSection::default(),
            analysis: AnalysisSection::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("config {0} is not a flat JSON object")]
    NotFlat(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("malformed override `{0}`; expected key=value")]
    Override(String),
    #[error("config schema violation: {0}")]
    Schema(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) if !LEAVES.contains(&prefix) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("prefixes are objects");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

/// Flat key/value view of a configuration, without the derived seeds.
pub fn to_flat(cfg: &RunConfig) -> BTreeMap<String, Value> {
    let mut out = BTreeMap::new();
    flatten("", &serde_json::to_value(cfg).expect("config serializes"), &mut out);
    for (k, _) in DERIVED_SEEDS {
        out.remove(*k);
    }
    out
}

/// Accumulates file values and `key=value` overrides on top of the defaults.
#[derive(Debug, Clone)]
pub struct ConfigBuilder {
    flat: BTreeMap<String, Value>,
}

impl Default for ConfigBuilder {
    fn default() -> Self {
        ConfigBuilder {
            flat: to_flat(&RunConfig::default()),
        }
    }
}

impl ConfigBuilder {
    pub fn set(&mut self, key: &str, value: Value) -> Result<(), ConfigError> {
        match self.flat.get_mut(key) {
            Some(slot) => {
                *slot = value;
                Ok(())
            }
            None => Err(ConfigError::UnknownKey(key.to_string())),
        }
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            source: e,
        })?;
        let v: Value = serde_json::from_str(&text).map_err(|e| ConfigError::Schema(format!("{}: {e}", path.display())))?;
        let Value::Object(m) = v else {
            return Err(ConfigError::NotFlat(path.display().to_string()));
        };
        for (k, x) in m {
            self.set(&k, x)?;
        }
        Ok(())
    }

    /// Parses `key=value`; the value is read as JSON, falling back to a
    /// plain string.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), ConfigError> {
        let (k, v) = spec.split_once('=').ok_or_else(|| ConfigError::Override(spec.to_string()))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        self.set(k.trim(), value)
    }

    pub fn build(&self) -> Result<RunConfig, ConfigError> {
        let mut flat = self.flat.clone();
        let root = flat.get("seed").and_then(Value::as_u64).unwrap_or(0);
        for (k, stream) in DERIVED_SEEDS {
            flat.insert(k.to_string(), Value::from(derive_seed(root, stream)));
        }
        let cfg: RunConfig = serde_json::from_value(unflatten(&flat)).map_err(|e| ConfigError::Schema(e.to_string()))?;
        cfg.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.md.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.potential.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }
}

/// Resolved configuration as pretty flat JSON, suitable for `--config`.
pub fn echo(cfg: &RunConfig) -> String {
    let flat: Map<String, Value> = to_flat(cfg).into_iter().collect();
    serde_json::to_string_pretty(&Value::Object(flat)).expect("config serializes") + "\n"
}
