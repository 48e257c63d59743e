//! Condition bundles `[X_pre, A_pre; A, g, d, e]`, training-time condition
//! dropout and default resolution for inference.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::{AudioFeatureSequence, MotionSequence};

/// Main gaze direction in spherical coordinates (radians).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaze {
    pub theta: f64,
    pub phi: f64,
}

impl Gaze {
    pub const FORWARD: Gaze = Gaze {
        theta: 0.0,
        phi: 0.0,
    };

    pub fn new(theta: f64, phi: f64) -> Self {
        Self { theta, phi }
    }

    /// Unit direction vector; `(0, 0)` looks along +z.
    pub fn direction(&self) -> [f64; 3] {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        [cp * st, sp, cp * ct]
    }

    /// Angle between two directions, in degrees.
    pub fn angle_to(&self, other: &Gaze) -> f64 {
        let (a, b) = (self.direction(), other.direction());
        let dot = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0);
        dot.acos().to_degrees()
    }
}

/// Window audio. Frames at index `present` and beyond are null.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioCondition {
    pub features: AudioFeatureSequence,
    pub present: usize,
}

impl AudioCondition {
    pub fn full(features: AudioFeatureSequence) -> Self {
        let present = features.frames();
        Self { features, present }
    }
}

/// Overlap carried from the previous window: its last K motion frames and
/// last K audio frames. Present or absent as a unit.
#[derive(Clone, Debug, PartialEq)]
pub struct Carry {
    pub motion: MotionSequence,
    pub audio: AudioFeatureSequence,
}

/// Conditions that can be individually nulled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    Audio,
    Gaze,
    Distance,
    Emotion,
    Carry,
}

impl Condition {
    pub const ALL: [Condition; 5] = [
        Condition::Audio,
        Condition::Gaze,
        Condition::Distance,
        Condition::Emotion,
        Condition::Carry,
    ];
}

/// `None` marks a null condition.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConditionBundle {
    pub audio: Option<AudioCondition>,
    pub gaze: Option<Gaze>,
    pub distance: Option<f64>,
    pub emotion: Option<Vec<f64>>,
    pub carry: Option<Carry>,
}

impl ConditionBundle {
    /// Every condition null.
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn has(&self, c: Condition) -> bool {
        match c {
            Condition::Audio => self.audio.is_some(),
            Condition::Gaze => self.gaze.is_some(),
            Condition::Distance => self.distance.is_some(),
            Condition::Emotion => self.emotion.is_some(),
            Condition::Carry => self.carry.is_some(),
        }
    }

    /// Copy with condition `c` replaced by null.
    pub fn without(&self, c: Condition) -> Self {
        let mut out = self.clone();
        match c {
            Condition::Audio => out.audio = None,
            Condition::Gaze => out.gaze = None,
            Condition::Distance => out.distance = None,
            Condition::Emotion => out.emotion = None,
            Condition::Carry => out.carry = None,
        }
        out
    }

    /// Checks frame counts and widths against a model's expectations.
    pub fn validate(&self, dims: &ConditionDims) -> Result<()> {
        if let Some(a) = &self.audio {
            if a.features.frames() != dims.window || a.features.dim() != dims.audio_dim {
                return Err(Error::Shape {
                    op: "audio condition",
                    lhs: vec![dims.window, dims.audio_dim],
                    rhs: vec![a.features.frames(), a.features.dim()],
                });
            }
            if a.present > dims.window {
                return Err(Error::contract(format!(
                    "{} present audio frames in a {}-frame window",
                    a.present, dims.window
                )));
            }
        }
        if let Some(e) = &self.emotion {
            if e.len() != dims.emotion_dim {
                return Err(Error::validation(format!(
                    "emotion offset has {} entries, expected {}",
                    e.len(),
                    dims.emotion_dim
                )));
            }
        }
        if let Some(c) = &self.carry {
            let ok = c.motion.frames() == dims.overlap
                && c.audio.frames() == dims.overlap
                && c.motion.dim() == dims.motion_dim
                && c.audio.dim() == dims.audio_dim;
            if !ok {
                return Err(Error::Shape {
                    op: "carry condition",
                    lhs: vec![dims.overlap, dims.motion_dim, dims.overlap, dims.audio_dim],
                    rhs: vec![c.motion.frames(), c.motion.dim(), c.audio.frames(), c.audio.dim()],
                });
            }
        }
        Ok(())
    }
}

/// Shapes a condition bundle must have for a given model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditionDims {
    pub window: usize,
    pub overlap: usize,
    pub motion_dim: usize,
    pub audio_dim: usize,
    pub emotion_dim: usize,
}

/// Training-time condition dropout probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DropoutPolicy {
    /// Per-condition drop probability for A, g, d and e.
    pub condition: f64,
    /// Joint drop probability for the (X_pre, A_pre) pair.
    pub carry: f64,
    /// Probability of nulling a random audio tail when A is kept.
    pub audio_tail: f64,
}

impl Default for DropoutPolicy {
    fn default() -> Self {
        Self {
            condition: 0.1,
            carry: 0.5,
            audio_tail: 0.1,
        }
    }
}

impl DropoutPolicy {
    pub const NEVER: DropoutPolicy = DropoutPolicy {
        condition: 0.0,
        carry: 0.0,
        audio_tail: 0.0,
    };

    /// Independently nulls A, g, d and e with probability `condition` and
    /// the carry pair with probability `carry`. When A survives, with
    /// probability `audio_tail` its last `j` frames become null, `j`
    /// uniform in `[1, W/4]`.
    pub fn apply(&self, cond: &ConditionBundle, rng: &mut impl Rng) -> ConditionBundle {
        let mut out = cond.clone();
        // One draw per slot in a fixed order keeps streams aligned across
        // bundles regardless of which conditions are present.
        let drop_a = rng.gen::<f64>() < self.condition;
        let drop_g = rng.gen::<f64>() < self.condition;
        let drop_d = rng.gen::<f64>() < self.condition;
        let drop_e = rng.gen::<f64>() < self.condition;
        let drop_carry = rng.gen::<f64>() < self.carry;
        let tail = rng.gen::<f64>() < self.audio_tail;
        let tail_u = rng.gen::<f64>();
        if drop_a {
            out.audio = None;
        }
        if drop_g {
            out.gaze = None;
        }
        if drop_d {
            out.distance = None;
        }
        if drop_e {
            out.emotion = None;
        }
        if drop_carry {
            out.carry = None;
        }
        if let (Some(a), true) = (&mut out.audio, tail) {
            let w = a.features.frames();
            let max_j = (w / 4).max(1);
            let j = 1 + ((tail_u * max_j as f64) as usize).min(max_j - 1);
            a.present = a.present.min(w - j.min(w));
        }
        out
    }
}

/// Applies the default policy.
pub fn dropout_conditions(cond: &ConditionBundle, rng: &mut impl Rng) -> ConditionBundle {
    DropoutPolicy::default().apply(cond, rng)
}

/// The scalar conditions after defaults are filled in.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedControls {
    pub gaze: Gaze,
    pub distance: f64,
    pub emotion: Option<Vec<f64>>,
}

/// Unset gaze looks forward, unset distance becomes the training-set mean,
/// unset emotion stays null.
pub fn resolve_defaults(
    gaze: Option<Gaze>,
    distance: Option<f64>,
    emotion: Option<Vec<f64>>,
    mean_distance: f64,
    emotion_dim: usize,
) -> Result<ResolvedControls> {
    if let Some(e) = &emotion {
        if e.len() != emotion_dim {
            return Err(Error::validation(format!(
                "emotion offset has {} entries, expected {emotion_dim}",
                e.len()
            )));
        }
    }
    Ok(ResolvedControls {
        gaze: gaze.unwrap_or(Gaze::FORWARD),
        distance: distance.unwrap_or(mean_distance),
        emotion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bundle(w: usize, k: usize) -> ConditionBundle {
        let audio = AudioFeatureSequence::from_vec(w, 3, (0..w * 3).map(|i| i as f64).collect()).unwrap();
        ConditionBundle {
            audio: Some(AudioCondition::full(audio)),
            gaze: Some(Gaze::new(0.1, -0.1)),
            distance: Some(1.0),
            emotion: Some(vec![0.5; 4]),
            carry: Some(Carry {
                motion: MotionSequence::from_vec(k, 2, vec![1.0; k * 2]).unwrap(),
                audio: AudioFeatureSequence::from_vec(k, 3, vec![2.0; k * 3]).unwrap(),
            }),
        }
    }

    #[test]
    fn never_policy_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = bundle(16, 4);
        for _ in 0..100 {
            assert_eq!(DropoutPolicy::NEVER.apply(&b, &mut rng), b);
        }
    }

    #[test]
    fn tail_drop_keeps_prefix_bit_exact() {
        let policy = DropoutPolicy {
            condition: 0.0,
            carry: 0.0,
            audio_tail: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = bundle(32, 8);
        for _ in 0..200 {
            let out = policy.apply(&b, &mut rng);
            let a = out.audio.as_ref().unwrap();
            let j = 32 - a.present;
            assert!((1..=8).contains(&j), "j = {j}");
            let orig = &b.audio.as_ref().unwrap().features;
            for f in 0..a.present {
                for (x, y) in a.features.frame(f).iter().zip(orig.frame(f)) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn tail_length_covers_full_range() {
        let policy = DropoutPolicy {
            condition: 0.0,
            carry: 0.0,
            audio_tail: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = bundle(32, 8);
        let mut seen = [false; 9];
        for _ in 0..2000 {
            let a = policy.apply(&b, &mut rng).audio.unwrap();
            seen[32 - a.present] = true;
        }
        assert!(seen[1..=8].iter().all(|&s| s));
    }

    #[test]
    fn defaults_resolve() {
        let r = resolve_defaults(None, None, None, 0.93, 4).unwrap();
        assert_eq!(r.gaze, Gaze::new(0.0, 0.0));
        assert_eq!(r.distance, 0.93);
        assert_eq!(r.emotion, None);
        let r = resolve_defaults(Some(Gaze::new(0.3, -0.2)), None, None, 1.0, 4).unwrap();
        assert_eq!(r.gaze, Gaze::new(0.3, -0.2));
        assert!(matches!(
            resolve_defaults(None, None, Some(vec![0.0; 3]), 1.0, 4),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn gaze_angles() {
        assert!(Gaze::FORWARD.angle_to(&Gaze::FORWARD).abs() < 1e-9);
        let ten = 10f64.to_radians();
        assert!((Gaze::FORWARD.angle_to(&Gaze::new(ten, 0.0)) - 10.0).abs() < 1e-9);
    }
}
