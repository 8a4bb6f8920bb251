//! Experiment configuration: a TOML file with one table per concern,
//! optionally patched with `section.key=value` overrides.

use crate::error::{CliError, CliResult};
use clare_core::clare::StageConfig;
use clare_core::policy::BackboneSpec;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Adapters with autoencoder routing and dynamic expansion.
    Clare,
    /// Sequential full fine-tuning.
    Seqfft,
    /// Full fine-tuning with experience replay.
    Er,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Clare => "clare",
            Method::Seqfft => "seqfft",
            Method::Er => "er",
        })
    }
}

/// `gamma` as written in TOML: a number, `inf`, or the string `"infinite"`.
pub mod gamma_format {
    use super::*;

    pub fn serialize<S: Serializer>(g: &f64, s: S) -> Result<S::Ok, S::Error> {
        if g.is_infinite() {
            s.serialize_str("infinite")
        } else {
            s.serialize_f64(*g)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Int(i64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Int(v) => Ok(v as f64),
            Raw::Text(t) => match t.to_ascii_lowercase().as_str() {
                "inf" | "infinite" | "infinity" => Ok(f64::INFINITY),
                other => other
                    .parse()
                    .map_err(|_| serde::de::Error::custom(format!("invalid gamma {t:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteSection {
    pub seed: u64,
    pub n_pretrain: usize,
    pub n_stream: usize,
    /// Demonstrations per task.
    pub demos: usize,
}

impl Default for SuiteSection {
    fn default() -> Self {
        SuiteSection {
            seed: 0,
            n_pretrain: 8,
            n_stream: 5,
            demos: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    #[serde(flatten)]
    pub spec: BackboneSpec,
    pub euler_steps: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            spec: BackboneSpec::default(),
            euler_steps: clare_core::policy::DEFAULT_EULER_STEPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            steps: 5000,
            lr: 1e-3,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSection {
    #[serde(with = "gamma_format")]
    pub gamma: f64,
    pub adapter_rank: usize,
    pub disc_rank: usize,
    pub adapter_steps: u64,
    pub disc_steps: u64,
    pub batch_size: usize,
    pub adapter_lr: f64,
    pub disc_lr: f64,
    pub down_init_std: f64,
}

impl Default for StageSection {
    fn default() -> Self {
        let c = StageConfig::default();
        StageSection {
            gamma: c.gamma,
            adapter_rank: c.adapter_rank,
            disc_rank: c.disc_rank,
            adapter_steps: c.adapter_steps,
            disc_steps: c.disc_steps,
            batch_size: c.batch_size,
            adapter_lr: c.adapter_lr,
            disc_lr: c.disc_lr,
            down_init_std: c.down_init_std,
        }
    }
}

impl StageSection {
    pub fn to_core(&self) -> StageConfig {
        StageConfig {
            adapter_rank: self.adapter_rank,
            disc_rank: self.disc_rank,
            adapter_steps: self.adapter_steps,
            disc_steps: self.disc_steps,
            batch_size: self.batch_size,
            adapter_lr: self.adapter_lr,
            disc_lr: self.disc_lr,
            down_init_std: self.down_init_std,
            gamma: self.gamma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodSection {
    pub name: Method,
    /// Learning rate of the full fine-tuning baselines (cosine decay). They
    /// train for `stage.adapter_steps` steps per stage.
    pub finetune_lr: f64,
    /// Probability that a replay sample comes from the buffer.
    pub replay_fraction: f64,
}

impl Default for MethodSection {
    fn default() -> Self {
        MethodSection {
            name: Method::Clare,
            finetune_lr: 1e-4,
            replay_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Rollouts per cell; even, since every initial configuration is used
    /// twice.
    pub episodes: usize,
    pub seed: u64,
    /// Minimum mean pretraining-task success expected before the stream.
    pub pretrain_gate: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            episodes: 40,
            seed: 7,
            pretrain_gate: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed for initialization and training; the task suite has its own.
    pub seed: u64,
    pub suite: SuiteSection,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub stage: StageSection,
    pub method: MethodSection,
    pub eval: EvalSection,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => config_err(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `section.key=value` assignments. Values are parsed as TOML
    /// and fall back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, sets: &[S]) -> CliResult<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| config_err(e.to_string()))?;
        for set in sets {
            let set = set.as_ref();
            let (path, raw) = set
                .split_once('=')
                .ok_or_else(|| config_err(format!("override {set:?} is not key=value")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
            let mut node = &mut root;
            let keys: Vec<&str> = path.trim().split('.').collect();
            for (i, key) in keys.iter().enumerate() {
                let table = node
                    .as_table_mut()
                    .ok_or_else(|| config_err(format!("override {path}: {key} is not inside a table")))?;
                if i + 1 == keys.len() {
                    if !table.contains_key(*key) {
                        return Err(config_err(format!("unknown configuration key {path}")));
                    }
                    table.insert(key.to_string(), value.clone());
                    break;
                }
                node = table
                    .get_mut(*key)
                    .ok_or_else(|| config_err(format!("unknown configuration key {path}")))?;
            }
        }
        let cfg: ExperimentConfig = root.try_into().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.spec.validate()?;
        self.stage.to_core().validate()?;
        if self.suite.n_pretrain == 0 || self.suite.n_stream == 0 || self.suite.demos == 0 {
            return Err(config_err("suite needs at least one task and one demonstration"));
        }
        if self.eval.episodes == 0 || self.eval.episodes % 2 != 0 {
            return Err(config_err("eval.episodes must be even and positive"));
        }
        if self.model.euler_steps == 0 {
            return Err(config_err("model.euler_steps must be positive"));
        }
        if self.pretrain.batch_size == 0 || !(self.pretrain.lr > 0.0) {
            return Err(config_err("pretrain needs a positive batch size and learning rate"));
        }
        if !(self.method.finetune_lr > 0.0) {
            return Err(config_err("method.finetune_lr must be positive"));
        }
        if !(0.0..=1.0).contains(&self.method.replay_fraction) {
            return Err(config_err("method.replay_fraction must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Fields that must agree for two runs to be aggregated together.
    pub fn comparison_key(&self) -> serde_json::Value {
        serde_json::json!({
            "suite": self.suite,
            "model": self.model,
            "pretrain": self.pretrain,
            "eval": self.eval,
        })
    }
}
