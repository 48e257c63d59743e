//! Sliding-window generation of arbitrarily long motion from audio.
//!
//! Audio of `N` frames is cut into consecutive segments of `W` new frames.
//! The first window has no carry; every later window is conditioned on the
//! last `K` motion frames it was handed from the previous window's output
//! and the last `K` audio frames of the previous segment. A short final
//! segment is padded with null audio frames, and only its real frames are
//! kept. Overlap frames are never re-emitted, so the output has exactly `N`
//! frames.

use rand::Rng;

use crate::conditioning::{AudioCondition, Carry, ConditionBundle, ResolvedControls};
use crate::diffusion::{sample_batch, CfgScales, Denoise, NoiseSchedule};
use crate::error::{Error, Result};
use crate::sequence::{AudioFeatureSequence, MotionSequence};
use crate::tensor::Tensor;

/// What one window was generated from.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowTrace {
    /// First output frame this window produced.
    pub start: usize,
    /// Frames of real audio in the window; the rest were null.
    pub real_frames: usize,
    pub carry: Option<Carry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LongOutput {
    /// `N` frames in data space.
    pub motion: MotionSequence,
    pub windows: Vec<WindowTrace>,
}

/// One sequence to generate.
#[derive(Clone, Copy, Debug)]
pub struct LongRequest<'a> {
    pub audio: &'a AudioFeatureSequence,
    pub controls: &'a ResolvedControls,
}

/// Generates motion for one audio sequence.
pub fn generate_long<D: Denoise + ?Sized, R: Rng>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    audio: &AudioFeatureSequence,
    controls: &ResolvedControls,
    scales: &CfgScales,
    steps: usize,
    rng: &mut R,
) -> Result<LongOutput> {
    let req = [LongRequest { audio, controls }];
    let mut out = generate_long_batch(denoiser, schedule, &req, scales, steps, std::slice::from_mut(rng))?;
    Ok(out.pop().expect("one output"))
}

/// Generates several sequences in lockstep: window `i` of every sequence
/// that has one is sampled in a single batch. Each sequence draws only from
/// its own rng.
pub fn generate_long_batch<D: Denoise + ?Sized, R: Rng>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    requests: &[LongRequest<'_>],
    scales: &CfgScales,
    steps: usize,
    rngs: &mut [R],
) -> Result<Vec<LongOutput>> {
    if requests.len() != rngs.len() {
        return Err(Error::contract("one rng per generated sequence"));
    }
    let (w, k) = (denoiser.window(), denoiser.overlap());
    if k >= w {
        return Err(Error::contract(format!("overlap {k} must be below the window {w}")));
    }
    for r in requests {
        if r.audio.frames() == 0 {
            return Err(Error::contract("cannot generate from empty audio"));
        }
    }
    let mut parts: Vec<Vec<MotionSequence>> = vec![Vec::new(); requests.len()];
    let mut traces: Vec<Vec<WindowTrace>> = vec![Vec::new(); requests.len()];
    let windows = requests.iter().map(|r| r.audio.frames().div_ceil(w)).max().unwrap_or(0);
    for wi in 0..windows {
        let start = wi * w;
        let mut active = Vec::new();
        let mut conds = Vec::new();
        for (i, r) in requests.iter().enumerate() {
            let n = r.audio.frames();
            if start >= n {
                continue;
            }
            let real = (n - start).min(w);
            let carry = match (k, parts[i].last()) {
                (k, Some(prev)) if k > 0 => Some(Carry {
                    motion: prev.tail(k)?,
                    audio: r.audio.slice(start - k, k)?,
                }),
                _ => None,
            };
            let cond = ConditionBundle {
                audio: Some(AudioCondition {
                    features: padded(r.audio, start, real, w)?,
                    present: real,
                }),
                gaze: Some(r.controls.gaze),
                distance: Some(r.controls.distance),
                emotion: r.controls.emotion.clone(),
                carry: carry.clone(),
            };
            traces[i].push(WindowTrace {
                start,
                real_frames: real,
                carry,
            });
            active.push((i, real));
            conds.push(cond);
        }
        let cond_refs: Vec<&ConditionBundle> = conds.iter().collect();
        let mut window_rngs: Vec<&mut R> = Vec::with_capacity(active.len());
        let mut next = active.iter().map(|&(i, _)| i).peekable();
        for (i, r) in rngs.iter_mut().enumerate() {
            if next.peek() == Some(&i) {
                window_rngs.push(r);
                next.next();
            }
        }
        let samples = sample_batch(denoiser, schedule, &cond_refs, scales, steps, &mut window_rngs)?;
        for ((i, real), x0) in active.into_iter().zip(samples) {
            let raw = denoiser.decode_motion(&x0);
            let kept = if real == w { raw } else { raw.slice_rows(0, real)? };
            parts[i].push(MotionSequence::new(kept)?);
        }
    }
    Ok(parts
        .into_iter()
        .zip(traces)
        .map(|(p, windows)| {
            let refs: Vec<&MotionSequence> = p.iter().collect();
            LongOutput {
                motion: MotionSequence::concat(&refs).expect("non-empty output"),
                windows,
            }
        })
        .collect())
}

/// `real` audio frames from `start`, zero-filled up to `w` frames. The
/// filled frames are marked null by the caller and never reach the model.
fn padded(audio: &AudioFeatureSequence, start: usize, real: usize, w: usize) -> Result<AudioFeatureSequence> {
    let seg = audio.slice(start, real)?;
    if real == w {
        return Ok(seg);
    }
    let fill = Tensor::zeros([w - real, audio.dim()]);
    AudioFeatureSequence::new(Tensor::concat_rows(&[seg.tensor(), &fill])?)
}

/// Accumulates frame-to-frame latent jumps, split into window seams and
/// within-window pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SeamStats {
    pub seam_sum: f64,
    pub seams: usize,
    pub inner_sum: f64,
    pub inner: usize,
}

impl SeamStats {
    /// Adds a sequence generated with window length `w`.
    pub fn add(&mut self, motion: &MotionSequence, w: usize) {
        for f in 1..motion.frames() {
            let jump = motion
                .frame(f)
                .iter()
                .zip(motion.frame(f - 1))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if f % w == 0 {
                self.seam_sum += jump;
                self.seams += 1;
            } else {
                self.inner_sum += jump;
                self.inner += 1;
            }
        }
    }

    /// Mean seam jump over mean within-window jump.
    pub fn ratio(&self) -> Result<f64> {
        if self.seams == 0 || self.inner == 0 {
            return Err(Error::InsufficientData(
                "boundary ratio needs at least one seam and one within-window pair".into(),
            ));
        }
        let inner = self.inner_sum / self.inner as f64;
        if inner == 0.0 {
            return Err(Error::InsufficientData("motion is constant within windows".into()));
        }
        Ok((self.seam_sum / self.seams as f64) / inner)
    }
}

/// Boundary ratio pooled over sequences generated with window `w`.
pub fn boundary_ratio<'a>(motions: impl IntoIterator<Item = &'a MotionSequence>, w: usize) -> Result<f64> {
    let mut s = SeamStats::default();
    motions.into_iter().for_each(|m| s.add(m, w));
    s.ratio()
}
