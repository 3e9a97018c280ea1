//! Run configuration: one flat `section.key = value` file.
//!
//! Every key has a default; unknown keys and ill-typed values are rejected.
//! Values take the type of the default they replace: numbers, booleans,
//! strings, or comma-separated number lists.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Number, Value};

use crate::adversary::AdversaryConfig;
use crate::baselines::PdGains;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::policy::PolicyConfig;
use crate::ppo::PpoConfig;

/// Environment variable that takes precedence over `--config`.
pub const CONFIG_ENV_VAR: &str = "COVERT_LEADER_CONFIG";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Episodes rolled out to build the adversary dataset.
    pub dataset_episodes: usize,
    /// Argmax actions during dataset collection.
    pub greedy_collection: bool,
    /// Start stage 3 from the stage-1 weights instead of a fresh init.
    pub warm_start: bool,
    pub stage3_iterations: usize,
    /// Entropy bonus used in stage 3 in place of `ppo.entropy_coef`. The
    /// hiding penalty is sparse, so stage 3 needs more exploration.
    pub stage3_entropy_coef: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset_episodes: 100,
            greedy_collection: true,
            warm_start: false,
            stage3_iterations: 3000,
            stage3_entropy_coef: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub sizes: Vec<usize>,
    pub transfer_n: usize,
    /// Leader distance below which the goal counts as reached.
    pub goal_radius: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            sizes: (3..=10).collect(),
            transfer_n: 12,
            goal_radius: 0.2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub policy: PolicyConfig,
    pub ppo: PpoConfig,
    pub adversary: AdversaryConfig,
    pub pipeline: PipelineConfig,
    pub eval: EvalConfig,
    pub baseline: PdGains,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate().map_err(to_config)?;
        self.ppo.validate()?;
        self.baseline.validate()?;
        if self.adversary.hidden == 0 || self.adversary.batch_episodes == 0 {
            return Err(Error::Config("adversary: hidden and batch_episodes must be positive".into()));
        }
        if !(self.adversary.train_fraction > 0.0 && self.adversary.train_fraction < 1.0) {
            return Err(Error::Config("adversary: train_fraction must lie in (0, 1)".into()));
        }
        if self.eval.sizes.iter().any(|&n| n < 2) || self.eval.transfer_n < 2 {
            return Err(Error::Config("eval: team sizes must be at least 2".into()));
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut tree = serde_json::to_value(Self::default())?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            set_key(&mut tree, key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        let cfg: Self = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies one `section.key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut tree = serde_json::to_value(&*self)?;
        set_key(&mut tree, key, value).map_err(Error::Config)?;
        let cfg: Self = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    /// Every key in `section.key = value` form; parses back to `self`.
    pub fn to_kv_string(&self) -> String {
        let tree = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        for (section, fields) in tree.as_object().expect("object") {
            for (key, value) in fields.as_object().expect("section object") {
                out.push_str(&format!("{section}.{key} = {}\n", render(value)));
            }
        }
        out
    }

    pub fn snapshot(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Config path from the environment variable, else the flag value.
pub fn resolve_config_path(flag: Option<&Path>) -> Option<PathBuf> {
    std::env::var_os(CONFIG_ENV_VAR)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .or_else(|| flag.map(Path::to_path_buf))
}

fn to_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

fn render(value: &Value) -> String {
    match value {
        Value::Array(items) => items.iter().map(render).collect::<Vec<_>>().join(","),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn set_key(tree: &mut Value, key: &str, raw: &str) -> std::result::Result<(), String> {
    let (section, field) = key
        .split_once('.')
        .ok_or_else(|| format!("key `{key}` needs a section prefix"))?;
    let slot = tree
        .get_mut(section)
        .and_then(Value::as_object_mut)
        .ok_or_else(|| format!("unknown section `{section}`"))?
        .get_mut(field)
        .ok_or_else(|| format!("unknown key `{key}`"))?;
    *slot = typed_like(slot, raw).ok_or_else(|| format!("bad value `{raw}` for `{key}`"))?;
    Ok(())
}

fn typed_like(default: &Value, raw: &str) -> Option<Value> {
    match default {
        Value::Bool(_) => raw.parse().ok().map(Value::Bool),
        Value::Number(n) if n.is_u64() => raw.parse::<u64>().ok().map(Value::from),
        Value::Number(_) => raw
            .parse::<f64>()
            .ok()
            .and_then(Number::from_f64)
            .map(Value::Number),
        Value::String(_) => Some(Value::String(raw.to_string())),
        Value::Array(items) => {
            let proto = items.first().cloned().unwrap_or(Value::from(0u64));
            if raw.is_empty() {
                return Some(Value::Array(Vec::new()));
            }
            raw.split(',')
                .map(|part| typed_like(&proto, part.trim()))
                .collect::<Option<Vec<_>>>()
                .map(Value::Array)
        }
        Value::Object(_) | Value::Null => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_kv_string()).unwrap(), cfg);
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::parse("env.horizon = 20\n# comment\nppo.learning_rate=0.001\neval.sizes = 3, 4\npipeline.warm_start = true\n").unwrap();
        assert_eq!(cfg.env.horizon, 20);
        assert_eq!(cfg.ppo.learning_rate, 0.001);
        assert_eq!(cfg.eval.sizes, vec![3, 4]);
        assert!(cfg.pipeline.warm_start);
        assert_eq!(RunConfig::parse(&cfg.to_kv_string()).unwrap(), cfg);
    }

    #[test]
    fn float_keys_accept_integers() {
        let cfg = RunConfig::parse("env.accel_mag = 3").unwrap();
        assert_eq!(cfg.env.accel_mag, 3.0);
    }

    #[test]
    fn unknown_and_bad_values_rejected() {
        for text in ["env.nope = 1", "bogus.x = 1", "horizon = 3", "env.horizon = abc", "env.horizon", "ppo.clip_ratio = 2"] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn set_rejects_invalid() {
        let mut cfg = RunConfig::default();
        cfg.set("ppo.total_iterations", "7").unwrap();
        assert_eq!(cfg.ppo.total_iterations, 7);
        assert!(cfg.set("ppo.gamma", "1.5").is_err());
        assert_eq!(cfg.ppo.gamma, 0.99);
    }
}
