//! Run configuration. Every field has a default, so an empty file is a
//! complete desk-scale configuration.
//!
//! ```toml
//! [world]        # synthetic data generator
//! [dataset]      # count, length, seed of the training set
//! [denoiser]     # transformer widths, window W and overlap K
//! [schedule]     # T, beta_start, beta_end
//! [train]        # batch_size, iterations, lr, warmup, seed, log_every
//! [dropout]      # condition, carry, audio_tail
//! [capp]         # CAPP encoders and their training
//! [generation]   # default guidance scales and sampling steps
//! [eval]         # held-out set size and repeats
//! [paths]        # artifact locations, relative to the data root
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::capp::CappConfig;
use crate::conditioning::DropoutPolicy;
use crate::denoiser::DenoiserConfig;
use crate::diffusion::{CfgScales, ScheduleConfig};
use crate::error::{Error, Result};
use crate::train::TrainConfig;
use crate::world::WorldConfig;

/// Environment variable naming the default data root.
pub const DATA_ROOT_ENV: &str = "MOTIONDIFF_DATA";
pub const DEFAULT_DATA_ROOT: &str = "data";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub count: usize,
    /// Frames per sequence.
    pub length: usize,
    pub seed: u64,
    /// Sequences per shard file.
    pub shard_size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 500,
            length: 200,
            seed: 1,
            shard_size: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub lambda_a: f64,
    pub lambda_g: f64,
    pub lambda_d: f64,
    pub lambda_e: f64,
    pub lambda_pre: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        let s = CfgScales::default();
        Self {
            lambda_a: s.lambda_a,
            lambda_g: s.lambda_g,
            lambda_d: s.lambda_d,
            lambda_e: s.lambda_e,
            lambda_pre: s.lambda_pre,
            steps: 50,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn scales(&self) -> CfgScales {
        CfgScales {
            lambda_a: self.lambda_a,
            lambda_g: self.lambda_g,
            lambda_d: self.lambda_d,
            lambda_e: self.lambda_e,
            lambda_pre: self.lambda_pre,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub count: usize,
    pub length: usize,
    /// Seed of the held-out world sequences.
    pub data_seed: u64,
    /// Seed of the generations.
    pub seed: u64,
    pub repeats: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            count: 16,
            length: 160,
            data_seed: 1_000_003,
            seed: 11,
            repeats: 3,
        }
    }
}

/// Artifact locations. Relative paths resolve against the data root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Empty means `$MOTIONDIFF_DATA`, falling back to `./data`.
    pub data_root: String,
    pub dataset: String,
    pub denoiser: String,
    pub capp: String,
    pub reports: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_root: String::new(),
            dataset: "dataset".into(),
            denoiser: "denoiser.ckpt".into(),
            capp: "capp.ckpt".into(),
            reports: "reports".into(),
        }
    }
}

impl PathsConfig {
    pub fn root(&self) -> PathBuf {
        if !self.data_root.is_empty() {
            return PathBuf::from(&self.data_root);
        }
        std::env::var_os(DATA_ROOT_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_ROOT))
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root().join(p)
        }
    }

    pub fn dataset(&self) -> PathBuf {
        self.resolve(&self.dataset)
    }

    pub fn denoiser(&self) -> PathBuf {
        self.resolve(&self.denoiser)
    }

    pub fn capp(&self) -> PathBuf {
        self.resolve(&self.capp)
    }

    pub fn reports(&self) -> PathBuf {
        self.resolve(&self.reports)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub dataset: DatasetConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub dropout: DropoutPolicy,
    pub capp: CappConfig,
    pub generation: GenerationConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.denoiser.validate()?;
        self.train.validate()?;
        self.capp.validate()?;
        self.generation
            .scales()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        let (w, d) = (&self.world, &self.denoiser);
        if (w.pose_dim, w.dyn_dim, w.audio_dim, w.emotion_dim) != (d.pose_dim, d.dyn_dim, d.audio_dim, d.emotion_dim) {
            return Err(Error::Config(format!(
                "denoiser widths (pose {}, dyn {}, audio {}, emotion {}) differ from the world's ({}, {}, {}, {})",
                d.pose_dim, d.dyn_dim, d.audio_dim, d.emotion_dim, w.pose_dim, w.dyn_dim, w.audio_dim, w.emotion_dim
            )));
        }
        if self.schedule.steps == 0 || self.generation.steps == 0 || self.generation.steps > self.schedule.steps {
            return Err(Error::Config(format!(
                "sampling steps {} must be in [1, T={}]",
                self.generation.steps, self.schedule.steps
            )));
        }
        if !(0.0 < self.schedule.beta_start && self.schedule.beta_start <= self.schedule.beta_end && self.schedule.beta_end < 1.0) {
            return Err(Error::Config("need 0 < beta_start <= beta_end < 1".into()));
        }
        let p = |v: f64| (0.0..=1.0).contains(&v);
        if !(p(self.dropout.condition) && p(self.dropout.carry) && p(self.dropout.audio_tail)) {
            return Err(Error::Config("dropout probabilities must lie in [0, 1]".into()));
        }
        if self.dataset.count == 0 || self.dataset.length == 0 || self.dataset.shard_size == 0 {
            return Err(Error::Config("dataset count, length and shard_size must be positive".into()));
        }
        if self.eval.repeats == 0 {
            return Err(Error::Config("eval repeats must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 over the settings that determine dataset contents.
    pub fn dataset_hash(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Key<'a> {
            world: &'a WorldConfig,
            count: usize,
            length: usize,
            seed: u64,
        }
        let key = Key {
            world: &self.world,
            count: self.dataset.count,
            length: self.dataset.length,
            seed: self.dataset.seed,
        };
        let text = toml::to_string(&key).map_err(|e| Error::Config(e.to_string()))?;
        Ok(format!("{:x}", Sha256::digest(text.as_bytes())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.generation.steps, 50);
        assert_eq!(cfg.generation.lambda_a, 0.5);
        assert_eq!(cfg.generation.lambda_g, 1.0);
        assert_eq!(cfg.dropout.condition, 0.1);
        assert_eq!(cfg.dropout.carry, 0.5);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(matches!(RunConfig::from_toml("[train]\nbatch = 3\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[world]\naudio_dim = 12\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[generation]\nsteps = 0\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[generation]\nlambda_a = -1.0\n"), Err(Error::Config(_))));
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = RunConfig::from_toml("[generation]\nlambda_a = 1.0\nsteps = 10\n").unwrap();
        assert_eq!(cfg.generation.lambda_a, 1.0);
        assert_eq!(cfg.generation.lambda_g, 1.0);
        assert_eq!(cfg.generation.steps, 10);
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn dataset_hash_tracks_content_settings_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.iterations += 1;
        assert_eq!(a.dataset_hash().unwrap(), b.dataset_hash().unwrap());
        b.dataset.seed += 1;
        assert_ne!(a.dataset_hash().unwrap(), b.dataset_hash().unwrap());
    }

    #[test]
    fn explicit_data_root_wins() {
        let paths = PathsConfig {
            data_root: "/tmp/x".into(),
            ..Default::default()
        };
        assert_eq!(paths.denoiser(), PathBuf::from("/tmp/x/denoiser.ckpt"));
        let abs = PathsConfig {
            capp: "/abs/c.ckpt".into(),
            ..paths
        };
        assert_eq!(abs.capp(), PathBuf::from("/abs/c.ckpt"));
    }
}
