//! On-disk datasets: world samples split over archive shards plus a TOML
//! manifest.
//!
//! Each shard stores, for its `j`-th sequence, tensors `j.audio`
//! `[frames, audio_dim]`, `j.motion` `[frames, motion_dim]` and
//! `j.controls` `[3 + emotion_dim]` = `(theta, phi, d, e...)`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::conditioning::Gaze;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::sequence::{AudioFeatureSequence, MotionSequence};
use crate::tensor::Tensor;
use crate::world::{SyntheticWorld, WorldSample};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const DATASET_KIND: &str = "dataset";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub file: String,
    pub sequences: usize,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub count: usize,
    pub length: usize,
    pub total_frames: usize,
    pub shards: Vec<ShardEntry>,
}

pub fn shard_name(i: usize) -> String {
    format!("shard-{i:05}.bin")
}

fn encode_shard(samples: &[WorldSample]) -> Result<Archive> {
    let mut a = Archive::new();
    a.set_meta("kind", DATASET_KIND);
    for (j, s) in samples.iter().enumerate() {
        a.push(format!("{j}.audio"), s.audio.tensor().clone());
        a.push(format!("{j}.motion"), s.motion.tensor().clone());
        let mut c = vec![s.gaze.theta, s.gaze.phi, s.distance];
        c.extend_from_slice(&s.emotion);
        a.push(format!("{j}.controls"), Tensor::new([c.len()], c)?);
    }
    Ok(a)
}

fn decode_shard(a: &Archive, sequences: usize) -> Result<Vec<WorldSample>> {
    if a.meta("kind") != Some(DATASET_KIND) {
        return Err(Error::Format(format!("expected a dataset shard, found kind {:?}", a.meta("kind"))));
    }
    (0..sequences)
        .map(|j| {
            let c = a.require(&format!("{j}.controls"))?.data();
            if c.len() < 3 {
                return Err(Error::Format(format!("sequence {j} has {} control values", c.len())));
            }
            Ok(WorldSample {
                audio: AudioFeatureSequence::new(a.require(&format!("{j}.audio"))?.clone())?,
                motion: MotionSequence::new(a.require(&format!("{j}.motion"))?.clone())?,
                gaze: Gaze::new(c[0], c[1]),
                distance: c[2],
                emotion: c[3..].to_vec(),
            })
        })
        .collect()
}

/// Generates `cfg.dataset` from `cfg.world` and writes shards and manifest
/// into `dir`. Output bytes depend only on the config.
pub fn write_dataset(dir: &Path, cfg: &RunConfig) -> Result<Manifest> {
    let d = &cfg.dataset;
    let world = SyntheticWorld::new(cfg.world.clone())?;
    let samples = world.generate_dataset(d.count, d.length, d.seed)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut shards = Vec::new();
    for (i, chunk) in samples.chunks(d.shard_size).enumerate() {
        let file = shard_name(i);
        encode_shard(chunk)?.save(dir.join(&file))?;
        shards.push(ShardEntry {
            file,
            sequences: chunk.len(),
            frames: chunk.iter().map(|s| s.motion.frames()).sum(),
        });
    }
    let manifest = Manifest {
        config_hash: cfg.dataset_hash()?,
        seed: d.seed,
        count: d.count,
        length: d.length,
        total_frames: shards.iter().map(|s| s.frames).sum(),
        shards,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Reads every shard listed in the manifest, in order.
pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<WorldSample>)> {
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.count);
    for s in &manifest.shards {
        let a = Archive::load(dir.join(&s.file))?;
        samples.extend(decode_shard(&a, s.sequences)?);
    }
    if samples.len() != manifest.count {
        return Err(Error::Format(format!(
            "manifest lists {} sequences, shards hold {}",
            manifest.count,
            samples.len()
        )));
    }
    Ok((manifest, samples))
}
