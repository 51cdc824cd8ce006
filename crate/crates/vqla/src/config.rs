//! `key = value` configuration with a closed key registry: unknown keys are
//! errors, every key has a default, and the effective configuration echoes
//! deterministically into run manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Result, VqlaError};
use crate::model::ModelConfig;
use crate::pipeline::TrainConfig;

/// Registry of known keys and their defaults.
pub const KNOWN_KEYS: &[(&str, &str)] = &[
    ("model.image_size", "64"),
    ("model.patch", "8"),
    ("model.c_vision", "64"),
    ("model.vision_depth", "4"),
    ("model.vision_heads", "4"),
    ("model.c_lm", "128"),
    ("model.decoder_layers", "4"),
    ("model.decoder_heads", "4"),
    ("model.visual_tokens", "16"),
    ("model.context", "256"),
    ("model.lora_rank", "8"),
    ("model.lora_alpha", "16"),
    ("model.vss_state", "8"),
    ("model.vss_expand", "1"),
    ("model.c_ground", "128"),
    ("model.ground_layers", "2"),
    ("model.ground_heads", "4"),
    ("model.tit_levels", "2"),
    ("train.epochs", "20"),
    ("train.batch_size", "16"),
    ("train.lr", "0.00001"),
    ("train.weight_decay", "0.01"),
    ("train.seed", "0"),
    ("train.vision_trainable", "true"),
    ("train.max_steps", "0"),
    ("train.max_answer_len", "8"),
    ("data.frames", ""),
    ("data.records", ""),
    ("data.images", ""),
    ("gen.endpoint", "mock"),
    ("gen.timeout_s", "30"),
    ("gen.retries", "2"),
    ("gen.kinds", "conversation,description,reasoning,vqla"),
    ("ckpt.stage1", ""),
    ("ckpt.model", ""),
    ("eval.split", "test"),
    ("infer.image", ""),
    ("infer.question", ""),
    ("fixtures.frames", "100"),
    ("fixtures.image_size", "64"),
    ("fixtures.max_instruments", "2"),
];

#[derive(Debug, Clone)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            values: KNOWN_KEYS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl Config {
    /// Parses `key = value` lines; `#` starts a comment, blank lines are
    /// skipped, unknown keys are errors.
    pub fn load(path: &Path) -> Result<Config> {
        let mut config = Config::default();
        let text = std::fs::read_to_string(path).map_err(|e| {
            VqlaError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(VqlaError::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    msg: "expected `key = value`".into(),
                });
            };
            config.set(key.trim(), value.trim()).map_err(|e| VqlaError::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(config)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.values.contains_key(key) {
            return Err(VqlaError::Config(format!("unknown config key `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies repeatable `key=value` override strings.
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<()> {
        for s in sets {
            let Some((key, value)) = s.split_once('=') else {
                return Err(VqlaError::Config(format!(
                    "override `{s}` must be key=value"
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn str(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("unregistered config key {key}"))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.str(key)
            .parse()
            .map_err(|_| VqlaError::Config(format!("`{key}` must be a non-negative integer")))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.str(key)
            .parse()
            .map_err(|_| VqlaError::Config(format!("`{key}` must be a non-negative integer")))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.str(key)
            .parse()
            .map_err(|_| VqlaError::Config(format!("`{key}` must be a number")))
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.str(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(VqlaError::Config(format!(
                "`{key}` must be a boolean, got `{other}`"
            ))),
        }
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.str(key);
        if v.is_empty() {
            None
        } else {
            Some(PathBuf::from(v))
        }
    }

    pub fn required_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key)
            .ok_or_else(|| VqlaError::Config(format!("config key `{key}` is required")))
    }

    /// Effective configuration: every known key with its current value.
    pub fn echo(&self) -> BTreeMap<String, String> {
        self.values.clone()
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            image_size: self.usize("model.image_size")?,
            patch: self.usize("model.patch")?,
            c_vision: self.usize("model.c_vision")?,
            vision_depth: self.usize("model.vision_depth")?,
            vision_heads: self.usize("model.vision_heads")?,
            c_lm: self.usize("model.c_lm")?,
            decoder_layers: self.usize("model.decoder_layers")?,
            decoder_heads: self.usize("model.decoder_heads")?,
            visual_tokens: self.usize("model.visual_tokens")?,
            context: self.usize("model.context")?,
            lora_rank: self.usize("model.lora_rank")?,
            lora_alpha: self.f64("model.lora_alpha")?,
            vss_state: self.usize("model.vss_state")?,
            vss_expand: self.usize("model.vss_expand")?,
            c_ground: self.usize("model.c_ground")?,
            ground_layers: self.usize("model.ground_layers")?,
            ground_heads: self.usize("model.ground_heads")?,
            tit_levels: self.usize("model.tit_levels")?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.usize("train.epochs")?,
            batch_size: self.usize("train.batch_size")?,
            lr: self.f64("train.lr")?,
            weight_decay: self.f64("train.weight_decay")?,
            seed: self.u64("train.seed")?,
            vision_trainable: self.bool("train.vision_trainable")?,
            max_steps: self.usize("train.max_steps")?,
            max_answer_len: self.usize("train.max_answer_len")?,
        })
    }
}
