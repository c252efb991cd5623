use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::hex;
use crate::error::{Error, Result};

/// Every tunable of a run. Fields missing from a config file take their
/// defaults, so a file may override just a handful of values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub patch_size: usize,
    pub quality_threshold: u8,
    pub score_threshold: f64,
    pub noise_dim: usize,
    pub gan_epochs: usize,
    pub clf_epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub gp_lambda: f64,
    pub critic_steps: usize,
    pub batch_size: usize,
    /// Adam `(beta1, beta2)` for both WGAN networks.
    pub gan_betas: (f64, f64),
    /// Adam `(beta1, beta2)` for the classifiers.
    pub clf_betas: (f64, f64),

    pub growth_rate: usize,
    pub block_layers: Vec<usize>,
    pub bottleneck_width: usize,
    pub compression: f64,
    pub stem_channels: usize,
    pub head_dense: (usize, usize),
    pub head_dropout: f64,

    /// Channels of the generator's first feature map.
    pub gen_channels: usize,
    /// Channels of the critic's first convolution.
    pub critic_channels: usize,

    pub segment_block: usize,
    pub segment_var_threshold: f64,
    /// Minimum distance between surviving minutiae, in pixels.
    pub min_minutia_distance: f64,
    /// Keep at most this many (highest quality) minutiae per image; 0 keeps all.
    pub max_patches_per_image: usize,
    /// Section-level parallelism; 0 picks `min(9, cores)`.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            patch_size: 96,
            quality_threshold: 15,
            score_threshold: 0.5,
            noise_dim: 128,
            gan_epochs: 125,
            clf_epochs: 100,
            learning_rate: 1e-4,
            weight_decay: 4e-4,
            gp_lambda: 10.0,
            critic_steps: 5,
            batch_size: 64,
            gan_betas: (0.0, 0.9),
            clf_betas: (0.9, 0.999),
            growth_rate: 32,
            block_layers: vec![6, 12, 24, 16],
            bottleneck_width: 4,
            compression: 0.5,
            stem_channels: 64,
            head_dense: (256, 128),
            head_dropout: 0.3,
            gen_channels: 256,
            critic_channels: 64,
            segment_block: 16,
            segment_var_threshold: 100.0,
            min_minutia_distance: 8.0,
            max_patches_per_image: 0,
            workers: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patch_size", self.patch_size),
            ("noise_dim", self.noise_dim),
            ("gan_epochs", self.gan_epochs),
            ("clf_epochs", self.clf_epochs),
            ("critic_steps", self.critic_steps),
            ("batch_size", self.batch_size),
            ("growth_rate", self.growth_rate),
            ("bottleneck_width", self.bottleneck_width),
            ("stem_channels", self.stem_channels),
            ("gen_channels", self.gen_channels),
            ("critic_channels", self.critic_channels),
            ("segment_block", self.segment_block),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.score_threshold > 0.0 && self.score_threshold < 1.0) {
            return Err(Error::Config(format!(
                "score_threshold {} outside (0, 1)",
                self.score_threshold
            )));
        }
        if self.quality_threshold > 100 {
            return Err(Error::Config("quality_threshold above 100".into()));
        }
        if !self.patch_size.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "patch_size {} must be a multiple of 16 (four 2x upsampling stages)",
                self.patch_size
            )));
        }
        if self.block_layers.is_empty() || self.block_layers.contains(&0) {
            return Err(Error::Config("block_layers must be non-empty and positive".into()));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(Error::Config("compression outside (0, 1]".into()));
        }
        for (name, r) in [("head_dropout", self.head_dropout)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("{name} {r} outside [0, 1)")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || self.weight_decay < 0.0 {
            return Err(Error::Config("learning_rate must be positive, weight_decay non-negative".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Digest of the fields that determine network shapes. Checkpoints
    /// written under one hash cannot be loaded into models built under
    /// another.
    pub fn compat_hash(&self) -> String {
        let arch = serde_json::json!({
            "patch_size": self.patch_size,
            "noise_dim": self.noise_dim,
            "growth_rate": self.growth_rate,
            "block_layers": self.block_layers,
            "bottleneck_width": self.bottleneck_width,
            "compression": self.compression,
            "stem_channels": self.stem_channels,
            "head_dense": self.head_dense,
            "gen_channels": self.gen_channels,
            "critic_channels": self.critic_channels,
        });
        let digest = Sha256::digest(arch.to_string().as_bytes());
        hex(&digest[..8])
    }

    /// Digest of everything that affects a trained result, for caching.
    pub fn full_hash(&self) -> String {
        let mut c = self.clone();
        c.workers = 0;
        let text = serde_json::to_string(&c).expect("config serializes");
        hex(&Sha256::digest(text.as_bytes())[..8])
    }

    pub fn effective_workers(&self) -> usize {
        if self.workers > 0 {
            self.workers
        } else {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
                .min(9)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_training_setup() {
        let c = RunConfig::default();
        assert_eq!(c.patch_size, 96);
        assert_eq!(c.quality_threshold, 15);
        assert_eq!(c.score_threshold, 0.5);
        assert_eq!(c.noise_dim, 128);
        assert_eq!(c.gan_epochs, 125);
        assert_eq!(c.clf_epochs, 100);
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.weight_decay, 4e-4);
        assert_eq!(c.gp_lambda, 10.0);
        assert_eq!(c.critic_steps, 5);
        assert_eq!(c.block_layers, [6, 12, 24, 16]);
        c.validate().unwrap();
    }

    #[test]
    fn partial_file_overrides_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 9, "gan_epochs": 3}"#).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.gan_epochs, 3);
        assert_eq!(c.patch_size, 96);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 9}"#).is_err());
    }

    #[test]
    fn validation_rejects_bad_values() {
        let bad = [
            RunConfig { score_threshold: 1.0, ..Default::default() },
            RunConfig { score_threshold: 0.0, ..Default::default() },
            RunConfig { batch_size: 0, ..Default::default() },
            RunConfig { patch_size: 40, ..Default::default() },
            RunConfig { critic_steps: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn compat_hash_tracks_architecture_only() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 5, gan_epochs: 1, ..Default::default() };
        let c = RunConfig { patch_size: 32, ..Default::default() };
        assert_eq!(a.compat_hash(), b.compat_hash());
        assert_ne!(a.compat_hash(), c.compat_hash());
        assert_ne!(a.full_hash(), b.full_hash());
    }
}
