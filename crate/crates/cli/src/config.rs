//! JSON run configuration. Every section is optional; unknown keys are rejected.

use std::path::Path;

use mpgen_core::model::Stage2Config;
use mpgen_core::tokenizer::TokenizerConfig;
use mpgen_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub image_size: (usize, usize),
    pub map_size: (usize, usize),
    pub max_paths: usize,
    pub path_indices: Vec<usize>,
    pub params: Vec<String>,
    pub fov_deg: f64,
    /// Flight `(start, end, velocity)`; a scenario default when absent.
    pub trajectory: Option<((f64, f64), (f64, f64), (f64, f64))>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let o = mpgen_synth::SweepOptions::default();
        Self {
            image_size: o.image_size,
            map_size: o.map_size,
            max_paths: o.max_paths,
            path_indices: o.path_indices,
            params: o.params,
            fov_deg: o.fov_deg,
            trajectory: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub image_tokenizer: TokenizerConfig,
    pub map_tokenizer: TokenizerConfig,
    pub stage2: Stage2Config,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            image_tokenizer: TokenizerConfig::image(),
            map_tokenizer: TokenizerConfig::map(),
            stage2: Stage2Config::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Overlays `user` onto `base`, recursing into objects; other values replace.
fn merge(base: &mut Value, user: Value) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Parses a possibly partial config: omitted keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self, serde_json::Error> {
        let mut v = serde_json::to_value(RunConfig::default())?;
        merge(&mut v, serde_json::from_str(text)?);
        serde_json::from_value(v)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, Box<dyn std::error::Error>> {
        let cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                RunConfig::parse(&text).map_err(|e| format!("{}: {e}", p.display()))?
            }
            None => RunConfig::default(),
        };
        cfg.train.validate()?;
        cfg.stage2.validate()?;
        cfg.image_tokenizer.validate()?;
        cfg.map_tokenizer.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_fail() {
        let c = RunConfig::parse(r#"{"train": {"epochs": 3}, "stage2": {"mapper": {"token_moe": {"top_k": 1}}}}"#).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.stage2.mapper.token_moe.top_k, 1);
        assert_eq!(c.stage2.mapper.token_moe.n_routed, 5);
        assert!(RunConfig::parse(r#"{"trian": {}}"#).is_err());
        assert!(RunConfig::parse(r#"{"train": {"epoch": 3}}"#).is_err());
        assert!(RunConfig::parse(r#"{"stage2": {"mapper": {"token_moe": {"topk": 1}}}}"#).is_err());
        assert!(RunConfig::parse(r#"{"synth": {"map_size": [16, 16], "colour": 1}}"#).is_err());
    }

    #[test]
    fn defaults_roundtrip() {
        let c = RunConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::parse(&s).unwrap(), c);
        assert_eq!(RunConfig::parse("{}").unwrap(), c);
    }
}
