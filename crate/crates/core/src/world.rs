//! Procedural ground-truth world of paired pseudo-audio and motion.
//!
//! Per frame, two latent drivers run underneath everything:
//!
//! * content `c` (2 channels): white noise smoothed by a width-2 moving
//!   average, unit variance;
//! * prosody `p` (3 channels): white noise smoothed by a width-3 moving
//!   average, unit variance.
//!
//! Audio features are `M [c; p] + noise_level * n`, with `M` a fixed random
//! `audio_dim x 5` matrix drawn from the world seed. Lip channel `k` of
//! `z_dyn` is `tanh(s_k * c_{k mod 2})` with a fixed scale `s_k`. The other
//! dyn channels are leaky walks plus `E e`. Rotations are
//! `(theta, phi, 0) + u` where `u_t = 0.98 u_{t-1} + 0.01 p_{t-lag}`;
//! translations are small leaky walks and the last pose entry is
//! `d` plus a small walk. Motion gets `0.1 * noise_level` observation noise.
//!
//! All processes are burnt in before the first emitted frame so samples are
//! stationary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conditioning::Gaze;
use crate::error::{Error, Result};
use crate::sequence::{AudioFeatureSequence, MotionSequence};

pub const CONTENT_CHANNELS: usize = 2;
pub const PROSODY_CHANNELS: usize = 3;
const DRIVERS: usize = CONTENT_CHANNELS + PROSODY_CHANNELS;
const CONTENT_SMOOTH: usize = 2;
const PROSODY_SMOOTH: usize = 3;
const POSE_DECAY: f64 = 0.98;
const POSE_GAIN: f64 = 0.01;
const DYN_DECAY: f64 = 0.97;
const DYN_STD: f64 = 0.5;
const TRANSLATION_DECAY: f64 = 0.99;
const TRANSLATION_STD: f64 = 0.01;
const MOTION_NOISE_RATIO: f64 = 0.1;
const BURN_IN: usize = 400;
/// Fewest frames `oracle_alignment` accepts.
pub const MIN_ALIGNMENT_FRAMES: usize = 8;

/// Range of gaze angles and distances drawn for training data.
pub const GAZE_RANGE: f64 = 0.35;
pub const DISTANCE_RANGE: (f64, f64) = (0.8, 1.2);
pub const EMOTION_STD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Seeds the fixed world constants (mixing matrix, lip scales, emotion map).
    pub seed: u64,
    pub frame_rate: usize,
    pub audio_dim: usize,
    pub pose_dim: usize,
    pub dyn_dim: usize,
    pub emotion_dim: usize,
    /// Zero-based indices into `z_dyn` driven by audio content.
    pub lip_channels: Vec<usize>,
    /// Frames between prosody and the pose response.
    pub lag: usize,
    pub noise_level: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            frame_rate: 25,
            audio_dim: 16,
            pose_dim: 6,
            dyn_dim: 16,
            emotion_dim: 8,
            lip_channels: vec![0, 1, 2, 3],
            lag: 2,
            noise_level: 0.05,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.pose_dim != 6 {
            return bad(format!("pose_dim must be 6 (3 angles + 3 translations), got {}", self.pose_dim));
        }
        if self.audio_dim < DRIVERS {
            return bad(format!("audio_dim must be at least {DRIVERS}, got {}", self.audio_dim));
        }
        if self.frame_rate == 0 {
            return bad("frame_rate must be positive".into());
        }
        if self.lip_channels.is_empty() || self.lip_channels.len() >= self.dyn_dim {
            return bad("lip_channels must be a non-empty proper subset of the dyn dims".into());
        }
        let mut seen = vec![false; self.dyn_dim];
        for &c in &self.lip_channels {
            if c >= self.dyn_dim || std::mem::replace(&mut seen[c], true) {
                return bad(format!("lip channel {c} is out of range or repeated"));
            }
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return bad(format!("noise_level must be finite and >= 0, got {}", self.noise_level));
        }
        Ok(())
    }

    pub fn motion_dim(&self) -> usize {
        self.pose_dim + self.dyn_dim
    }
}

/// One paired sample plus the controls that were injected.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldSample {
    pub audio: AudioFeatureSequence,
    pub motion: MotionSequence,
    pub gaze: Gaze,
    pub distance: f64,
    pub emotion: Vec<f64>,
}

/// Latent drivers behind a sample, kept for oracle tests.
#[derive(Clone, Debug)]
pub struct Drivers {
    /// `[frames x 2]`.
    pub content: Vec<[f64; CONTENT_CHANNELS]>,
    /// `[frames x 3]`, already delayed by `lag`.
    pub prosody_lagged: Vec<[f64; PROSODY_CHANNELS]>,
}

/// A world instance: the config plus constants derived from its seed.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    cfg: WorldConfig,
    /// `[audio_dim x 5]` row-major.
    mixing: Vec<f64>,
    /// `[5 x audio_dim]` row-major left inverse of `mixing`.
    unmixing: Vec<f64>,
    lip_scales: Vec<f64>,
    /// `[non-lip dyn x emotion_dim]` row-major.
    emotion_map: Vec<f64>,
    other_channels: Vec<usize>,
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

impl SyntheticWorld {
    pub fn new(cfg: WorldConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let a = cfg.audio_dim;
        let mix_std = (1.0 / DRIVERS as f64).sqrt();
        let mixing: Vec<f64> = (0..a * DRIVERS).map(|_| mix_std * normal(&mut rng)).collect();
        let unmixing = left_inverse(&mixing, a, DRIVERS)?;
        let lip_scales = cfg.lip_channels.iter().map(|_| rng.gen_range(0.8..1.5)).collect();
        let other_channels: Vec<usize> = (0..cfg.dyn_dim).filter(|c| !cfg.lip_channels.contains(c)).collect();
        let e_std = (1.0 / cfg.emotion_dim.max(1) as f64).sqrt();
        let emotion_map = (0..other_channels.len() * cfg.emotion_dim)
            .map(|_| e_std * normal(&mut rng))
            .collect();
        Ok(Self {
            cfg,
            mixing,
            unmixing,
            lip_scales,
            emotion_map,
            other_channels,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    /// The scale `s_k` of each lip channel, in `lip_channels` order.
    pub fn lip_scales(&self) -> &[f64] {
        &self.lip_scales
    }

    /// Random controls from the training distribution.
    pub fn sample_controls(&self, rng: &mut impl Rng) -> (Gaze, f64, Vec<f64>) {
        let gaze = Gaze::new(rng.gen_range(-GAZE_RANGE..GAZE_RANGE), rng.gen_range(-GAZE_RANGE..GAZE_RANGE));
        let distance = rng.gen_range(DISTANCE_RANGE.0..DISTANCE_RANGE.1);
        let emotion = (0..self.cfg.emotion_dim).map(|_| EMOTION_STD * normal(rng)).collect();
        (gaze, distance, emotion)
    }

    /// A sample with controls drawn by [`SyntheticWorld::sample_controls`].
    pub fn random_sample(&self, length: usize, rng: &mut impl Rng) -> Result<WorldSample> {
        let (g, d, e) = self.sample_controls(rng);
        self.generate_sample(length, g, d, &e, rng)
    }

    /// `count` samples of `length` frames with random controls. Sample `i`
    /// draws from its own stream of `seed`, so any prefix of a dataset is
    /// the same for every `count`.
    pub fn generate_dataset(&self, count: usize, length: usize, seed: u64) -> Result<Vec<WorldSample>> {
        (0..count)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                self.random_sample(length, &mut rng)
            })
            .collect()
    }

    pub fn generate_sample(
        &self,
        length: usize,
        gaze: Gaze,
        distance: f64,
        emotion: &[f64],
        rng: &mut impl Rng,
    ) -> Result<WorldSample> {
        Ok(self.generate_with_drivers(length, gaze, distance, emotion, rng)?.0)
    }

    /// Like [`SyntheticWorld::generate_sample`], also returning the latent drivers.
    pub fn generate_with_drivers(
        &self,
        length: usize,
        gaze: Gaze,
        distance: f64,
        emotion: &[f64],
        rng: &mut impl Rng,
    ) -> Result<(WorldSample, Drivers)> {
        let cfg = &self.cfg;
        if length == 0 {
            return Err(Error::contract("world sample needs at least one frame"));
        }
        if emotion.len() != cfg.emotion_dim {
            return Err(Error::validation(format!(
                "emotion has {} entries, expected {}",
                emotion.len(),
                cfg.emotion_dim
            )));
        }
        let total = BURN_IN + length;
        let content = smoothed_noise::<CONTENT_CHANNELS>(total, CONTENT_SMOOTH, rng);
        let prosody = smoothed_noise::<PROSODY_CHANNELS>(total + cfg.lag, PROSODY_SMOOTH, rng);

        let others = self.other_channels.len();
        let offsets: Vec<f64> = (0..others)
            .map(|r| {
                let row = &self.emotion_map[r * cfg.emotion_dim..(r + 1) * cfg.emotion_dim];
                row.iter().zip(emotion).map(|(m, e)| m * e).sum()
            })
            .collect();
        let innov = DYN_STD * (1.0 - DYN_DECAY * DYN_DECAY).sqrt();
        let t_innov = TRANSLATION_STD * (1.0 - TRANSLATION_DECAY * TRANSLATION_DECAY).sqrt();
        let mut walks: Vec<f64> = (0..others).map(|_| DYN_STD * normal(rng)).collect();
        let mut trans: [f64; 3] = [0.0; 3].map(|_: f64| TRANSLATION_STD * normal(rng));
        let mut u = [0.0f64; 3];

        let m_dim = cfg.motion_dim();
        let a_dim = cfg.audio_dim;
        let mut motion = Vec::with_capacity(length * m_dim);
        let mut audio = Vec::with_capacity(length * a_dim);
        let mut drivers = Drivers {
            content: Vec::with_capacity(length),
            prosody_lagged: Vec::with_capacity(length),
        };
        for t in 0..total {
            // Prosody index t is delayed by lag relative to content index t.
            let p_lag = prosody[t];
            let p_now = prosody[t + cfg.lag];
            for (ui, pi) in u.iter_mut().zip(p_lag) {
                *ui = POSE_DECAY * *ui + POSE_GAIN * pi;
            }
            for w in walks.iter_mut() {
                *w = DYN_DECAY * *w + innov * normal(rng);
            }
            for tr in trans.iter_mut() {
                *tr = TRANSLATION_DECAY * *tr + t_innov * normal(rng);
            }
            if t < BURN_IN {
                continue;
            }
            let c = content[t];
            let drv: [f64; DRIVERS] = [c[0], c[1], p_now[0], p_now[1], p_now[2]];
            for r in 0..a_dim {
                let row = &self.mixing[r * DRIVERS..(r + 1) * DRIVERS];
                let clean: f64 = row.iter().zip(&drv).map(|(m, x)| m * x).sum();
                audio.push(clean + cfg.noise_level * normal(rng));
            }

            let frame_start = motion.len();
            motion.extend_from_slice(&[
                gaze.theta + u[0],
                gaze.phi + u[1],
                u[2],
                trans[0],
                trans[1],
                distance + trans[2],
            ]);
            motion.resize(frame_start + m_dim, 0.0);
            let dyn_base = frame_start + cfg.pose_dim;
            for (k, &ch) in cfg.lip_channels.iter().enumerate() {
                motion[dyn_base + ch] = (self.lip_scales[k] * c[k % CONTENT_CHANNELS]).tanh();
            }
            for (r, &ch) in self.other_channels.iter().enumerate() {
                motion[dyn_base + ch] = walks[r] + offsets[r];
            }
            let motion_noise = cfg.noise_level * MOTION_NOISE_RATIO;
            if motion_noise > 0.0 {
                for v in &mut motion[frame_start..] {
                    *v += motion_noise * normal(rng);
                }
            }
            drivers.content.push(c);
            drivers.prosody_lagged.push(p_lag);
        }
        let sample = WorldSample {
            audio: AudioFeatureSequence::from_vec(length, a_dim, audio)?,
            motion: MotionSequence::from_vec(length, m_dim, motion)?,
            gaze,
            distance,
            emotion: emotion.to_vec(),
        };
        Ok((sample, drivers))
    }

    /// Content channels recovered from audio through the left inverse of
    /// the mixing matrix.
    pub fn recover_content(&self, audio: &AudioFeatureSequence) -> Result<Vec<[f64; CONTENT_CHANNELS]>> {
        let a = self.cfg.audio_dim;
        if audio.dim() != a {
            return Err(Error::Shape {
                op: "recover_content",
                lhs: vec![audio.frames(), a],
                rhs: vec![audio.frames(), audio.dim()],
            });
        }
        Ok((0..audio.frames())
            .map(|f| {
                let x = audio.frame(f);
                let mut c = [0.0; CONTENT_CHANNELS];
                for (k, ck) in c.iter_mut().enumerate() {
                    *ck = self.unmixing[k * a..(k + 1) * a].iter().zip(x).map(|(m, v)| m * v).sum();
                }
                c
            })
            .collect())
    }

    /// Mean Pearson correlation between each lip channel of `motion` and
    /// `tanh(s_k * c)` of the content recovered from `audio`. A channel with
    /// zero variance on either side scores 0.
    pub fn oracle_alignment(&self, motion: &MotionSequence, audio: &AudioFeatureSequence) -> Result<f64> {
        if motion.frames() != audio.frames() {
            return Err(Error::Shape {
                op: "oracle_alignment",
                lhs: vec![motion.frames()],
                rhs: vec![audio.frames()],
            });
        }
        if motion.frames() < MIN_ALIGNMENT_FRAMES {
            return Err(Error::InsufficientData(format!(
                "oracle alignment needs at least {MIN_ALIGNMENT_FRAMES} frames, got {}",
                motion.frames()
            )));
        }
        if motion.dim() != self.cfg.motion_dim() {
            return Err(Error::Shape {
                op: "oracle_alignment motion",
                lhs: vec![self.cfg.motion_dim()],
                rhs: vec![motion.dim()],
            });
        }
        let content = self.recover_content(audio)?;
        let mut total = 0.0;
        for (k, &ch) in self.cfg.lip_channels.iter().enumerate() {
            let lip = motion.channel(self.cfg.pose_dim + ch);
            let want: Vec<f64> = content
                .iter()
                .map(|c| (self.lip_scales[k] * c[k % CONTENT_CHANNELS]).tanh())
                .collect();
            total += pearson(&lip, &want);
        }
        Ok(total / self.cfg.lip_channels.len() as f64)
    }
}

/// Free-standing form of [`SyntheticWorld::oracle_alignment`].
pub fn oracle_alignment(motion: &MotionSequence, audio: &AudioFeatureSequence, cfg: &WorldConfig) -> Result<f64> {
    SyntheticWorld::new(cfg.clone())?.oracle_alignment(motion, audio)
}

/// Pearson correlation; 0 when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a[..n].iter().zip(&b[..n]) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let denom = (saa * sbb).sqrt();
    if denom <= 1e-12 * n as f64 {
        0.0
    } else {
        sab / denom
    }
}

/// `len` frames of unit-variance white noise averaged over `width` taps.
fn smoothed_noise<const C: usize>(len: usize, width: usize, rng: &mut impl Rng) -> Vec<[f64; C]> {
    let raw: Vec<[f64; C]> = (0..len + width - 1).map(|_| [0.0; C].map(|_: f64| normal(rng))).collect();
    let norm = 1.0 / (width as f64).sqrt();
    raw.windows(width)
        .map(|w| {
            let mut out = [0.0; C];
            for frame in w {
                for (o, v) in out.iter_mut().zip(frame) {
                    *o += v * norm;
                }
            }
            out
        })
        .collect()
}

/// `(A^T A)^{-1} A^T` for a tall full-column-rank `rows x cols` matrix.
fn left_inverse(a: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    let mut gram = vec![0.0; cols * cols];
    for i in 0..cols {
        for j in 0..cols {
            gram[i * cols + j] = (0..rows).map(|r| a[r * cols + i] * a[r * cols + j]).sum();
        }
    }
    // Gauss-Jordan with partial pivoting on [gram | A^T].
    let width = cols + rows;
    let mut m = vec![0.0; cols * width];
    for i in 0..cols {
        m[i * width..i * width + cols].copy_from_slice(&gram[i * cols..(i + 1) * cols]);
        for r in 0..rows {
            m[i * width + cols + r] = a[r * cols + i];
        }
    }
    for p in 0..cols {
        let pivot = (p..cols)
            .max_by(|&x, &y| m[x * width + p].abs().total_cmp(&m[y * width + p].abs()))
            .expect("non-empty");
        if m[pivot * width + p].abs() < 1e-12 {
            return Err(Error::validation("world mixing matrix is rank deficient"));
        }
        for c in 0..width {
            m.swap(p * width + c, pivot * width + c);
        }
        let d = m[p * width + p];
        m[p * width..(p + 1) * width].iter_mut().for_each(|v| *v /= d);
        for r in 0..cols {
            if r != p {
                let f = m[r * width + p];
                if f != 0.0 {
                    for c in 0..width {
                        m[r * width + c] -= f * m[p * width + c];
                    }
                }
            }
        }
    }
    Ok((0..cols).flat_map(|i| m[i * width + cols..(i + 1) * width].to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn left_inverse_recovers_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..16 * 5).map(|_| normal(&mut rng)).collect();
        let inv = left_inverse(&a, 16, 5).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let v: f64 = (0..16).map(|r| inv[i * 16 + r] * a[r * 5 + j]).sum();
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn pearson_edge_cases() {
        assert_eq!(pearson(&[1.0; 5], &[1.0, 2.0, 3.0, 4.0, 5.0]), 0.0);
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn smoothed_noise_has_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = smoothed_noise::<1>(50_000, 3, &mut rng);
        let var = x.iter().map(|v| v[0] * v[0]).sum::<f64>() / x.len() as f64;
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn config_validation() {
        assert!(WorldConfig::default().validate().is_ok());
        let bad = WorldConfig {
            lip_channels: vec![0, 0],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = WorldConfig {
            lip_channels: vec![16],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
