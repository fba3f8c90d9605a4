//! Run configuration: one TOML document with a section per stage.
//! Precedence is flags > file > built-in defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contrastive::{AugmentConfig, PretrainConfig};
use crate::data::{SynthConfig, TASK_MORTALITY};
use crate::distill::DistillConfig;
use crate::encoders::EncoderConfig;
use crate::probe::ProbeConfig;
use crate::similarity::CodeMatch;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("bad override `{0}`: expected section.key=value")]
    BadOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.15,
            test: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightsConfig {
    pub code_match: CodeMatch,
    /// Largest number of pair weights the cohort cache may hold.
    pub cache_budget: usize,
    pub histogram_bins: usize,
}

impl Default for WeightsConfig {
    fn default() -> Self {
        Self {
            code_match: CodeMatch::Ontology,
            cache_budget: 50_000_000,
            histogram_bins: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub task: String,
    pub label_fraction: f64,
    pub neighbor_ks: Vec<usize>,
    pub n_resamples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            task: TASK_MORTALITY.to_string(),
            label_fraction: 0.05,
            neighbor_ks: vec![1, 3, 5],
            n_resamples: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub synth: SynthConfig,
    pub split: SplitConfig,
    pub weights: WeightsConfig,
    pub encoder: EncoderConfig,
    pub augment: AugmentConfig,
    pub pretrain: PretrainConfig,
    pub distill: DistillConfig,
    pub probe: ProbeConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    /// Desk-scale defaults that run end to end on one core.
    fn default() -> Self {
        let synth = SynthConfig::default();
        Self {
            seed: 0,
            out_dir: "run".into(),
            encoder: EncoderConfig {
                layers: 2,
                heads: 4,
                model_dim: 16,
                ff_dim: 32,
                input_channels: 2 * synth.channels,
                max_timesteps: synth.horizon_hours,
                projection_dim: 16,
                ..EncoderConfig::default()
            },
            pretrain: PretrainConfig {
                batch_size: 64,
                epochs: 30,
                learning_rate: 1e-3,
                ..PretrainConfig::default()
            },
            distill: DistillConfig {
                epochs: 30,
                learning_rate: 1e-3,
                ..DistillConfig::default()
            },
            synth,
            split: SplitConfig::default(),
            weights: WeightsConfig::default(),
            augment: AugmentConfig::default(),
            probe: ProbeConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, sections) = parts.split_last().ok_or_else(|| ConfigError::BadOverride(key.into()))?;
    let mut table = root;
    for s in sections {
        let entry = table
            .entry(s.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::BadOverride(key.into()))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// Resolves file contents (may be empty) plus `key=value` overrides.
    pub fn resolve(file: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = file
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::BadOverride(o.clone()))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                path: p.display().to_string(),
                source,
            })?,
            None => String::new(),
        };
        Self::resolve(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.encoder.validate().map_err(|e| invalid(&e))?;
        self.pretrain.validate().map_err(|e| invalid(&e))?;
        self.augment.validate().map_err(|e| invalid(&e))?;
        self.distill.validate().map_err(|e| invalid(&e))?;
        if self.encoder.input_channels != 2 * self.synth.channels {
            return Err(ConfigError::Invalid(format!(
                "encoder.input_channels = {} but synthetic vitals have {} channels (expected {})",
                self.encoder.input_channels,
                self.synth.channels,
                2 * self.synth.channels
            )));
        }
        if self.encoder.max_timesteps < self.synth.horizon_hours {
            return Err(ConfigError::Invalid(
                "encoder.max_timesteps below synth.horizon_hours".into(),
            ));
        }
        if !(self.eval.label_fraction > 0.0 && self.eval.label_fraction <= 1.0) {
            return Err(ConfigError::Invalid("eval.label_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the resolved configuration. The output directory is
    /// left out so the same experiment hashes alike wherever it is written.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir.clear();
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }
}

/// Learning rate, temperature, distillation weight and raw-note probability
/// grids for the distillation sweep.
pub const GRID_LEARNING_RATES: [f64; 3] = [1e-4, 5e-4, 5e-5];
pub const GRID_TEMPERATURES: [f64; 3] = [1.0, 2.0, 5.0];
pub const GRID_LAMBDAS: [f64; 3] = [1.0, 5.0, 10.0];
pub const GRID_NOTE_PROBS: [f64; 3] = [0.0, 0.5, 1.0];

/// Every grid point as a `DistillConfig` derived from `base`.
pub fn distill_grid(base: &DistillConfig) -> Vec<DistillConfig> {
    let mut out = Vec::with_capacity(81);
    for &learning_rate in &GRID_LEARNING_RATES {
        for &temperature in &GRID_TEMPERATURES {
            for &lambda_distill in &GRID_LAMBDAS {
                for &raw_note_prob in &GRID_NOTE_PROBS {
                    out.push(DistillConfig {
                        learning_rate,
                        temperature,
                        lambda_distill,
                        raw_note_prob,
                        ..base.clone()
                    });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::WeightSpec;

    #[test]
    fn defaults_resolve_from_empty_file() {
        let cfg = RunConfig::resolve("", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.hash(), RunConfig::default().hash());
    }

    #[test]
    fn flags_override_file() {
        let file = "seed = 3\n[pretrain]\nepochs = 7\n";
        let cfg = RunConfig::resolve(file, &["pretrain.epochs=9".into(), "eval.task=los".into()]).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.pretrain.epochs, 9);
        assert_eq!(cfg.eval.task, "los");
        assert_ne!(cfg.hash(), RunConfig::default().hash());
    }

    #[test]
    fn hash_ignores_output_directory() {
        let a = RunConfig::resolve("", &["out_dir=\"x\"".into()]).unwrap();
        let b = RunConfig::resolve("", &["out_dir=\"y\"".into()]).unwrap();
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            RunConfig::resolve("[pretrain]\nepoch = 1\n", &[]),
            Err(ConfigError::Parse(_))
        ));
        assert!(matches!(
            RunConfig::resolve("bogus = 1\n", &[]),
            Err(ConfigError::Parse(_))
        ));
        assert!(RunConfig::resolve("", &["noequals".into()]).is_err());
    }

    #[test]
    fn weight_spec_round_trips() {
        let file = "[pretrain.weight_spec]\nfamily = \"threshold\"\ndelta = 0.5\n";
        let cfg = RunConfig::resolve(file, &[]).unwrap();
        assert_eq!(cfg.pretrain.weight_spec, WeightSpec::Threshold { delta: 0.5 });
        let again = RunConfig::resolve(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn inconsistent_shapes_are_rejected() {
        assert!(matches!(
            RunConfig::resolve("", &["synth.channels=5".into()]),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn grid_has_81_points() {
        let g = distill_grid(&DistillConfig::default());
        assert_eq!(g.len(), 81);
        let mut keys: Vec<String> = g
            .iter()
            .map(|c| {
                format!(
                    "{}-{}-{}-{}",
                    c.learning_rate, c.temperature, c.lambda_distill, c.raw_note_prob
                )
            })
            .collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 81);
    }
}
