//! JSON run configuration with `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::net::NetworkConfig;
use crate::scenes::DatasetSpec;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    /// Methods evaluated by `eval`; empty means the mode's defaults.
    pub methods: Vec<String>,
    /// `p` triples tried by `sweep-p`.
    pub p_grid: Vec<[f64; 3]>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetSpec::default(),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            methods: Vec::new(),
            p_grid: vec![[0.0, 0.0, 0.0], [0.0, 0.1, 0.5], [0.0, 0.5, 1.0]],
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.network.validate()?;
        self.train.validate()?;
        if self.dataset.image_size != self.network.image_size {
            return Err(Error::config(format!(
                "dataset.image_size {} differs from network.image_size {}",
                self.dataset.image_size, self.network.image_size
            )));
        }
        if self.dataset.num_classes != self.network.num_classes {
            return Err(Error::config(format!(
                "dataset.num_classes {} differs from network.num_classes {}",
                self.dataset.num_classes, self.network.num_classes
            )));
        }
        for m in &self.methods {
            m.parse::<crate::score::Method>()?;
        }
        for p in &self.p_grid {
            validate_p_triple(*p)?;
        }
        Ok(())
    }

    /// Parses JSON text, applies `key=value` overrides and validates.
    pub fn from_json_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value =
            serde_json::from_str(text).map_err(|e| Error::config(format!("invalid config JSON: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_with_overrides(&text, overrides)
    }
}

/// Grids must widen their expansion with resolution: `p3 > p2 > p1`, or all zero.
pub fn validate_p_triple(p: [f64; 3]) -> Result<()> {
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::config(format!("p {p:?} has values outside [0,1]")));
    }
    if p == [0.0; 3] || (p[2] > p[1] && p[1] > p[0]) {
        return Ok(());
    }
    Err(Error::config(format!(
        "p {p:?} must satisfy p3 > p2 > p1 or be (0,0,0)"
    )))
}

/// Sets a dotted `path=value` in a JSON tree. The value is parsed as JSON
/// when possible and kept as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(format!("override key `{path}` is malformed")));
    }
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("override `{path}`: `{}` is not an object", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("keys is nonempty")
}
