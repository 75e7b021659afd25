//! Run configuration shared by the command-line tools and the tests.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::diffusion::DiffusionConfig;
use crate::engine::{EvalConfig, InferConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::DecoderConfig;
use crate::synthetic::SceneConfig;

/// Environment variable that replaces every seed of a loaded config.
pub const SEED_ENV: &str = "GROUNDIFF_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scene: SceneConfig,
    /// Seed of the training set; the held-out set uses `seed + 1`.
    pub seed: u64,
    pub train_scenes: usize,
    pub test_scenes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            seed: 1,
            train_scenes: 2000,
            test_scenes: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: DecoderConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    /// Desk-scale defaults: small synthetic scenes, a 32-wide decoder and a
    /// short schedule that trains on one core in minutes.
    fn default() -> Self {
        let mut train = TrainConfig {
            epochs: 40,
            batch_size: 5,
            proposals: 32,
            warmup_epochs: 1,
            cooldown_epochs: 0,
            warmup_lr: 1e-5,
            min_lr: 1e-5,
            partitioned_matching: false,
            ..TrainConfig::default()
        };
        train.optimizer.lr = 1e-3;
        train.optimizer.clip_norm = 1.0;
        Self {
            data: DataConfig::default(),
            model: DecoderConfig::default(),
            diffusion: DiffusionConfig::default(),
            train,
            infer: InferConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Full-scale structure and learning settings.
    pub fn full_scale() -> Self {
        Self {
            model: DecoderConfig::full_scale(),
            train: TrainConfig::default(),
            ..Self::default()
        }
    }

    /// Parse a possibly partial config. Missing keys at any depth keep the
    /// values of [`RunConfig::default`].
    pub fn from_json(text: &str) -> Result<Self> {
        let bad = |e: serde_json::Error| Error::Config(e.to_string());
        let user: Value = serde_json::from_str(text).map_err(bad)?;
        if !user.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        let mut merged = serde_json::to_value(Self::default()).expect("config serializes");
        merge(&mut merged, user);
        let cfg: Self = serde_json::from_value(merged).map_err(bad)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file and apply the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)?.with_env_seed()
    }

    pub fn validate(&self) -> Result<()> {
        self.data.scene.validate()?;
        self.model.validate()?;
        self.diffusion.schedule()?;
        self.train.validate()?;
        if self.model.text_dim != self.data.scene.text_dim || self.model.channels != self.data.scene.channels {
            return Err(Error::Config(format!(
                "model expects text_dim {} / channels {}, scenes have {} / {}",
                self.model.text_dim, self.model.channels, self.data.scene.text_dim, self.data.scene.channels
            )));
        }
        if self.infer.n_steps == 0 || self.infer.proposals == 0 {
            return Err(Error::Config("infer.n_steps and infer.proposals must be positive".into()));
        }
        Ok(())
    }

    /// Seed used for training, model init and inference.
    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.model.init_seed = seed;
        self.infer.seed = seed;
        self
    }

    pub fn with_env_seed(self) -> Result<Self> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                let seed = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
                Ok(self.with_seed(seed))
            }
            Err(_) => Ok(self),
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    }
}

/// Overlay `over` onto `base`. Tagged enums (objects with a `kind` key)
/// are replaced whole so variants never mix.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) if !o.contains_key("kind") => {
            for (k, v) in o {
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

/// `git describe --always --dirty` of the working directory, or `"unknown"`
/// outside a repository.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_json(&serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"train": {"epochs": 2, "epocs": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("epocs"), "{err}");
        assert!(RunConfig::from_json(r#"{"trian": {}}"#).is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = RunConfig::from_json(r#"{"train": {"epochs": 2}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.batch_size, RunConfig::default().train.batch_size);
        assert_eq!(cfg.train.optimizer.lr, RunConfig::default().train.optimizer.lr);
        let cfg = RunConfig::from_json(r#"{"data": {"scene": {"instances": {"kind": "one_to_many", "counts": [5]}}}}"#).unwrap();
        assert_eq!(cfg.data.scene.instances, crate::synthetic::InstanceMode::OneToMany { counts: vec![5] });
        assert_eq!(cfg.data.train_scenes, 2000);
        assert!(RunConfig::from_json("[1]").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = a.clone().with_seed(7);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn mismatched_dimensions_fail_validation() {
        let mut cfg = RunConfig::default();
        cfg.model.text_dim = 12;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
