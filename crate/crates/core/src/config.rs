//! Run configuration: everything a pipeline stage reads besides the seed.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nets::ArchConfig;
use crate::schedule::ScheduleSpec;
use crate::trainer::{PretrainConfig, TrainConfig};
use crate::world::WorldSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub images_per_cell: usize,
    /// DDIM steps for benchmark images and prior sampling.
    pub sample_steps: usize,
    /// Master seeds the ablation averages over.
    pub ablation_seeds: Vec<u64>,
    /// Held-out renders per scene for the real-images row.
    pub real_images_per_scene: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            images_per_cell: 4,
            sample_steps: 50,
            ablation_seeds: vec![0, 1, 2],
            real_images_per_scene: 4,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.images_per_cell == 0 {
            return Err(Error::config("eval.images_per_cell", "must be >= 1"));
        }
        if self.sample_steps == 0 || self.sample_steps > steps {
            return Err(Error::config("eval.sample_steps", format!("must lie in [1, {steps}]")));
        }
        if self.ablation_seeds.is_empty() {
            return Err(Error::config("eval.ablation_seeds", "must not be empty"));
        }
        if self.real_images_per_scene == 0 {
            return Err(Error::config("eval.real_images_per_scene", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldSpec,
    pub arch: ArchConfig,
    pub schedule: ScheduleSpec,
    pub pretrain: PretrainConfig,
    pub finetune: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// The one-core preset used by the acceptance suite.
    pub fn desk() -> Self {
        Self {
            world: WorldSpec::default(),
            arch: ArchConfig::default(),
            schedule: ScheduleSpec::default(),
            pretrain: PretrainConfig::default(),
            finetune: TrainConfig::desk(),
            eval: EvalConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.arch.validate()?;
        if (self.arch.image_height, self.arch.image_width) != (self.world.image_height, self.world.image_width) {
            return Err(Error::config("arch.image_height", "must match world image size"));
        }
        self.schedule.build::<f64>()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.eval.validate(self.schedule.steps)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            finetune: TrainConfig::default(),
            ..Self::desk()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for cfg in [RunConfig::desk(), RunConfig::default()] {
            cfg.validate().unwrap();
            let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
        }
        assert_ne!(RunConfig::desk().hash(), RunConfig::default().hash());
    }

    #[test]
    fn finetune_defaults() {
        let d = RunConfig::default().finetune;
        assert_eq!((d.weights.lambda_cs, d.weights.lambda_fi, d.weights.lambda_fs), (1.0, 0.01, 0.01));
        assert_eq!((d.tau, d.steps, d.batch_size, d.n_prior, d.n_instance), (3, 1200, 1, 200, 1));
        assert_eq!(d.learning_rate, 1e-5);
        let k = RunConfig::desk().finetune;
        assert_eq!((k.steps, k.n_prior), (600, 32));
    }

    #[test]
    fn bad_fields_are_config_errors() {
        let mut c = RunConfig::desk();
        c.eval.sample_steps = 0;
        assert!(c.validate().unwrap_err().is_config());
        let mut c = RunConfig::desk();
        c.finetune.tau = 0;
        assert!(c.validate().unwrap_err().is_config());
    }
}
