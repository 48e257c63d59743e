//! Transformer encoder denoiser `H(X^t, t, C)` predicting the clean motion
//! window.
//!
//! Token layout per sequence (`L = 4 + 2K + 2W` tokens):
//!
//! ```text
//! 0            timestep (sinusoidal code -> 2-layer MLP)
//! 1            gaze g          (or its null token)
//! 2            distance d      (or its null token)
//! 3            emotion e       (or its null token)
//! 4 .. 4+K     X_pre frames    (or K copies of its null token)
//! 4+K .. 4+2K  A_pre frames    (or K copies of its null token)
//! 4+2K .. +W   A frames        (null token for dropped frames)
//! last W       noisy motion X^t
//! ```
//!
//! Carry tokens sit at positions `0..K` and current-window tokens at
//! `K..K+W` of a shared sinusoidal position code, which is added to every
//! per-frame token (null or not) and to none of the scalar tokens. Each
//! token kind has its own input projection, whose bias acts as that kind's
//! type embedding. The prediction is read from the last W positions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::conditioning::ConditionDims;
use crate::diffusion::{predict_with_graph, Denoise, DenoiseRequest, GraphDenoiser};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal, sinusoidal_table, LayerNorm, Linear, TransformerBlock};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    /// W, frames per window.
    pub window: usize,
    /// K, frames carried over from the previous window.
    pub overlap: usize,
    pub pose_dim: usize,
    pub dyn_dim: usize,
    pub audio_dim: usize,
    pub emotion_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            embed_dim: 96,
            heads: 4,
            window: 32,
            overlap: 8,
            pose_dim: 6,
            dyn_dim: 16,
            audio_dim: 16,
            emotion_dim: 8,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.heads == 0 {
            return bad("denoiser needs at least one layer and one head".into());
        }
        if self.embed_dim % self.heads != 0 || self.embed_dim % 2 != 0 {
            return bad(format!(
                "embed_dim {} must be even and divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if !(0 < self.overlap && self.overlap < self.window) {
            return bad(format!(
                "overlap K={} must satisfy 0 < K < W={}",
                self.overlap, self.window
            ));
        }
        if self.pose_dim + self.dyn_dim == 0 || self.audio_dim == 0 || self.emotion_dim == 0 {
            return bad("feature widths must be positive".into());
        }
        Ok(())
    }

    pub fn motion_dim(&self) -> usize {
        self.pose_dim + self.dyn_dim
    }

    /// Tokens per sequence.
    pub fn tokens(&self) -> usize {
        4 + 2 * self.overlap + 2 * self.window
    }

    pub fn condition_dims(&self) -> ConditionDims {
        ConditionDims {
            window: self.window,
            overlap: self.overlap,
            motion_dim: self.motion_dim(),
            audio_dim: self.audio_dim,
            emotion_dim: self.emotion_dim,
        }
    }

    /// Closed-form count of scalar weights:
    ///
    /// `2 lin(D,D) + lin(2,D) + lin(1,D) + lin(E,D) + 2 lin(M,D) + 2 lin(A,D)
    ///  + 6 D + layers * block(D) + 2 D + lin(D,M)`
    ///
    /// with `lin(i,o) = i*o + o` and
    /// `block(D) = 4D + lin(D,3D) + lin(D,D) + lin(D,4D) + lin(4D,D)`.
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let m = self.motion_dim();
        let lin = Linear::num_params;
        2 * lin(d, d)
            + lin(2, d)
            + lin(1, d)
            + lin(self.emotion_dim, d)
            + 2 * lin(m, d)
            + 2 * lin(self.audio_dim, d)
            + 6 * d
            + self.layers * TransformerBlock::num_params(d)
            + LayerNorm::num_params(d)
            + lin(d, m)
    }
}

#[derive(Clone, Debug)]
struct Layers {
    time1: Linear,
    time2: Linear,
    gaze: Linear,
    distance: Linear,
    emotion: Linear,
    carry_motion: Linear,
    carry_audio: Linear,
    audio: Linear,
    motion: Linear,
    null_gaze: ParamId,
    null_distance: ParamId,
    null_emotion: ParamId,
    null_carry_motion: ParamId,
    null_carry_audio: ParamId,
    null_audio: ParamId,
    blocks: Vec<TransformerBlock>,
    final_norm: LayerNorm,
    out: Linear,
}

/// Per-channel affine map between data space and the standardized space
/// the diffusion runs in.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl MotionScaler {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Per-channel mean and standard deviation over every frame of `frames`.
    pub fn fit<'a>(frames: impl IntoIterator<Item = &'a Tensor>, dim: usize) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for t in frames {
            if t.cols() != dim {
                return Err(Error::Shape {
                    op: "scaler fit",
                    lhs: vec![dim],
                    rhs: t.shape().to_vec(),
                });
            }
            for r in 0..t.rows() {
                for (j, &v) in t.row(r).iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
                n += 1;
            }
        }
        if n < 2 {
            return Err(Error::InsufficientData("scaler needs at least 2 frames".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n as f64 - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn encode(&self, raw: &Tensor) -> Tensor {
        let mut t = raw.clone();
        let c = t.cols();
        for row in t.data_mut().chunks_mut(c) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        t
    }

    pub fn decode(&self, model: &Tensor) -> Tensor {
        let mut t = model.clone();
        let c = t.cols();
        for row in t.data_mut().chunks_mut(c) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[j] + self.mean[j];
            }
        }
        t
    }
}

pub struct Denoiser {
    config: DenoiserConfig,
    store: ParamStore,
    layers: Layers,
    scaler: MotionScaler,
    positions: Tensor,
}

impl Denoiser {
    /// Freshly initialized weights drawn from `seed`.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut s = ParamStore::new();
        let d = config.embed_dim;
        let m = config.motion_dim();
        let a = config.audio_dim;
        let null = |s: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng| {
            s.add_normal(format!("null.{name}"), &[1, d], 0.5, rng)
        };
        let layers = Layers {
            time1: Linear::new(&mut s, "time.fc1", d, d, rng)?,
            time2: Linear::new(&mut s, "time.fc2", d, d, rng)?,
            gaze: Linear::new(&mut s, "embed.gaze", 2, d, rng)?,
            distance: Linear::new(&mut s, "embed.distance", 1, d, rng)?,
            emotion: Linear::new(&mut s, "embed.emotion", config.emotion_dim, d, rng)?,
            carry_motion: Linear::new(&mut s, "embed.carry_motion", m, d, rng)?,
            carry_audio: Linear::new(&mut s, "embed.carry_audio", a, d, rng)?,
            audio: Linear::new(&mut s, "embed.audio", a, d, rng)?,
            motion: Linear::new(&mut s, "embed.motion", m, d, rng)?,
            null_gaze: null(&mut s, "gaze", rng)?,
            null_distance: null(&mut s, "distance", rng)?,
            null_emotion: null(&mut s, "emotion", rng)?,
            null_carry_motion: null(&mut s, "carry_motion", rng)?,
            null_carry_audio: null(&mut s, "carry_audio", rng)?,
            null_audio: null(&mut s, "audio", rng)?,
            blocks: (0..config.layers)
                .map(|i| TransformerBlock::new(&mut s, &format!("block{i}"), d, config.heads, rng))
                .collect::<Result<_>>()?,
            final_norm: LayerNorm::new(&mut s, "final_norm", d)?,
            out: Linear::with_std(&mut s, "out", d, m, 0.1 / (d as f64).sqrt(), rng)?,
        };
        let positions = sinusoidal_table(config.overlap + config.window, d);
        Ok(Self {
            scaler: MotionScaler::identity(m),
            config,
            store: s,
            layers,
            positions,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn scaler(&self) -> &MotionScaler {
        &self.scaler
    }

    pub fn set_scaler(&mut self, scaler: MotionScaler) -> Result<()> {
        let m = self.config.motion_dim();
        if scaler.mean.len() != m || scaler.std.len() != m {
            return Err(Error::Shape {
                op: "set_scaler",
                lhs: vec![m],
                rhs: vec![scaler.mean.len(), scaler.std.len()],
            });
        }
        self.scaler = scaler;
        Ok(())
    }

    /// Positional code for token `i` of a sequence, if it is a per-frame
    /// token.
    fn position_of(&self, token: usize) -> Option<usize> {
        let (k, w) = (self.config.overlap, self.config.window);
        match token {
            0..=3 => None,
            t if t < 4 + k => Some(t - 4),
            t if t < 4 + 2 * k => Some(t - 4 - k),
            t => Some(k + (t - 4 - 2 * k) % w),
        }
    }

    fn position_matrix(&self, batch: usize) -> Tensor {
        let d = self.config.embed_dim;
        let l = self.config.tokens();
        let mut per_seq = Tensor::zeros([l, d]);
        for tok in 0..l {
            if let Some(p) = self.position_of(tok) {
                per_seq.row_mut(tok).copy_from_slice(self.positions.row(p));
            }
        }
        let mut out = Vec::with_capacity(batch * l * d);
        for _ in 0..batch {
            out.extend_from_slice(per_seq.data());
        }
        Tensor::new([batch * l, d], out).expect("position matrix")
    }

    fn check_request(&self, r: &DenoiseRequest<'_>) -> Result<()> {
        let (w, m) = (self.config.window, self.config.motion_dim());
        if r.x_t.shape() != [w, m] {
            return Err(Error::Shape {
                op: "denoise input",
                lhs: vec![w, m],
                rhs: r.x_t.shape().to_vec(),
            });
        }
        if r.t == 0 {
            return Err(Error::contract("timestep must be at least 1"));
        }
        r.cond.validate(&self.config.condition_dims())
    }
}

/// Accumulates gather sources and row picks while laying out tokens.
struct TokenLayout {
    sources: Vec<Var>,
    picks: Vec<(u32, u32)>,
}

impl TokenLayout {
    fn source(&mut self, v: Var) -> u32 {
        self.sources.push(v);
        (self.sources.len() - 1) as u32
    }

    fn pick(&mut self, src: u32, row: usize) {
        self.picks.push((src, row as u32));
    }
}

fn stack_rows(rows: &[&[f64]], width: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * width);
    rows.iter().for_each(|r| data.extend_from_slice(r));
    Tensor::new([rows.len(), width], data)
}

impl Denoise for Denoiser {
    fn window(&self) -> usize {
        self.config.window
    }

    fn frame_dim(&self) -> usize {
        self.config.motion_dim()
    }

    fn overlap(&self) -> usize {
        self.config.overlap
    }

    fn predict_x0(&self, batch: &[DenoiseRequest<'_>]) -> Result<Vec<Tensor>> {
        predict_with_graph(self, batch)
    }

    fn encode_motion(&self, raw: &Tensor) -> Tensor {
        self.scaler.encode(raw)
    }

    fn decode_motion(&self, model: &Tensor) -> Tensor {
        self.scaler.decode(model)
    }
}

impl GraphDenoiser for Denoiser {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn forward<'g>(&'g self, g: &mut Graph<'g>, batch: &[DenoiseRequest<'_>]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::contract("empty denoiser batch"));
        }
        for r in batch {
            self.check_request(r)?;
        }
        let cfg = &self.config;
        let (d, w, k, m) = (cfg.embed_dim, cfg.window, cfg.overlap, cfg.motion_dim());
        let b = batch.len();
        let ly = &self.layers;

        // Timestep tokens.
        let mut tcode = Vec::with_capacity(b * d);
        for r in batch {
            tcode.extend(sinusoidal(r.t as f64, d));
        }
        let tcode = g.constant(Tensor::new([b, d], tcode)?);
        let h = ly.time1.forward(g, tcode)?;
        let h = g.silu(h);
        let time_tok = ly.time2.forward(g, h)?;

        // Present-condition embeddings, one row per present item (or frame).
        let mut index = vec![[usize::MAX; 4]; b];
        let mut gaze_rows = Vec::new();
        let mut dist_rows = Vec::new();
        let mut emo_rows = Vec::new();
        let mut carry_m = Vec::new();
        let mut carry_a = Vec::new();
        let mut audio_rows = Vec::new();
        for (i, r) in batch.iter().enumerate() {
            if let Some(gz) = r.cond.gaze {
                index[i][0] = gaze_rows.len();
                gaze_rows.push(vec![gz.theta, gz.phi]);
            }
            if let Some(dv) = r.cond.distance {
                index[i][1] = dist_rows.len();
                dist_rows.push(vec![dv]);
            }
            if let Some(e) = &r.cond.emotion {
                index[i][2] = emo_rows.len();
                emo_rows.push(e.clone());
            }
            if let Some(c) = &r.cond.carry {
                index[i][3] = carry_m.len() / k;
                let enc = self.scaler.encode(c.motion.tensor());
                for f in 0..k {
                    carry_m.push(enc.row(f).to_vec());
                    carry_a.push(c.audio.frame(f).to_vec());
                }
            }
            if let Some(a) = &r.cond.audio {
                for f in 0..w {
                    audio_rows.push(a.features.frame(f));
                }
            }
        }
        let mut lay = TokenLayout {
            sources: Vec::new(),
            picks: Vec::with_capacity(b * cfg.tokens()),
        };
        let time_src = lay.source(time_tok);
        let embed = |g: &mut Graph<'g>, lay: &mut TokenLayout, rows: &[Vec<f64>], lin: &Linear| -> Result<Option<u32>> {
            if rows.is_empty() {
                return Ok(None);
            }
            let x = g.constant(Tensor::from_rows(rows)?);
            let e = lin.forward(g, x)?;
            Ok(Some(lay.source(e)))
        };
        let gaze_src = embed(g, &mut lay, &gaze_rows, &ly.gaze)?;
        let dist_src = embed(g, &mut lay, &dist_rows, &ly.distance)?;
        let emo_src = embed(g, &mut lay, &emo_rows, &ly.emotion)?;
        let cm_src = embed(g, &mut lay, &carry_m, &ly.carry_motion)?;
        let ca_src = embed(g, &mut lay, &carry_a, &ly.carry_audio)?;
        let audio_src = if audio_rows.is_empty() {
            None
        } else {
            let x = g.constant(stack_rows(&audio_rows, cfg.audio_dim)?);
            let e = ly.audio.forward(g, x)?;
            Some(lay.source(e))
        };
        let motion_in: Vec<&[f64]> = batch.iter().flat_map(|r| r.x_t.data().chunks(m)).collect();
        let x = g.constant(stack_rows(&motion_in, m)?);
        let motion_emb = ly.motion.forward(g, x)?;
        let motion_src = lay.source(motion_emb);
        let nulls = [
            ly.null_gaze,
            ly.null_distance,
            ly.null_emotion,
            ly.null_carry_motion,
            ly.null_carry_audio,
            ly.null_audio,
        ]
        .map(|p| {
            let v = g.param(p);
            lay.source(v)
        });

        let mut audio_item = 0usize;
        for (i, r) in batch.iter().enumerate() {
            lay.pick(time_src, i);
            for (slot, src) in [gaze_src, dist_src, emo_src].into_iter().enumerate() {
                match src {
                    Some(s) if index[i][slot] != usize::MAX => lay.pick(s, index[i][slot]),
                    _ => lay.pick(nulls[slot], 0),
                }
            }
            match (cm_src, ca_src, index[i][3]) {
                (Some(cm), Some(ca), c) if c != usize::MAX => {
                    (0..k).for_each(|f| lay.pick(cm, c * k + f));
                    (0..k).for_each(|f| lay.pick(ca, c * k + f));
                }
                _ => {
                    (0..k).for_each(|_| lay.pick(nulls[3], 0));
                    (0..k).for_each(|_| lay.pick(nulls[4], 0));
                }
            }
            match (&r.cond.audio, audio_src) {
                (Some(a), Some(src)) => {
                    for f in 0..w {
                        if f < a.present {
                            lay.pick(src, audio_item * w + f);
                        } else {
                            lay.pick(nulls[5], 0);
                        }
                    }
                    audio_item += 1;
                }
                _ => (0..w).for_each(|_| lay.pick(nulls[5], 0)),
            }
            (0..w).for_each(|f| lay.pick(motion_src, i * w + f));
        }

        let tokens = g.gather(&lay.sources, lay.picks)?;
        let pos = g.constant(self.position_matrix(b));
        let mut x = g.add(tokens, pos)?;
        for block in &ly.blocks {
            x = block.forward(g, x, b)?;
        }
        let l = cfg.tokens();
        let picks = (0..b)
            .flat_map(|i| (0..w).map(move |f| (0u32, (i * l + l - w + f) as u32)))
            .collect();
        let x = g.gather(&[x], picks)?;
        let x = ly.final_norm.forward(g, x)?;
        ly.out.forward(g, x)
    }
}

impl Denoiser {
    pub(crate) fn from_parts(config: DenoiserConfig, store: ParamStore, scaler: MotionScaler) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.store.load_values(&store)?;
        model.set_scaler(scaler)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{AudioCondition, Carry, ConditionBundle, Gaze};
    use crate::diffusion::gaussian;
    use crate::sequence::{AudioFeatureSequence, MotionSequence};

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            layers: 1,
            embed_dim: 8,
            heads: 2,
            window: 4,
            overlap: 2,
            pose_dim: 2,
            dyn_dim: 1,
            audio_dim: 3,
            emotion_dim: 2,
        }
    }

    fn full_cond(cfg: &DenoiserConfig, rng: &mut ChaCha8Rng) -> ConditionBundle {
        ConditionBundle {
            audio: Some(AudioCondition::full(
                AudioFeatureSequence::new(gaussian(&[cfg.window, cfg.audio_dim], rng)).unwrap(),
            )),
            gaze: Some(Gaze::new(0.2, -0.1)),
            distance: Some(1.1),
            emotion: Some(vec![0.3; cfg.emotion_dim]),
            carry: Some(Carry {
                motion: MotionSequence::new(gaussian(&[cfg.overlap, cfg.motion_dim()], rng)).unwrap(),
                audio: AudioFeatureSequence::new(gaussian(&[cfg.overlap, cfg.audio_dim], rng)).unwrap(),
            }),
        }
    }

    #[test]
    fn param_count_matches_formula() {
        for cfg in [tiny(), DenoiserConfig::default()] {
            let model = Denoiser::new(cfg.clone(), 1).unwrap();
            assert_eq!(model.store().num_scalars(), cfg.param_count());
        }
        // Regression value for the desk default.
        assert_eq!(DenoiserConfig::default().param_count(), 366_070);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.overlap = c.window;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn deterministic_and_shaped() {
        let cfg = tiny();
        let model = Denoiser::new(cfg.clone(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cond = full_cond(&cfg, &mut rng);
        let x = gaussian(&[cfg.window, cfg.motion_dim()], &mut rng);
        let req = [DenoiseRequest { x_t: &x, t: 17, cond: &cond }];
        let a = model.predict_x0(&req).unwrap();
        let b = model.predict_x0(&req).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].shape(), &[cfg.window, cfg.motion_dim()]);
        let again = Denoiser::new(cfg, 3).unwrap().predict_x0(&req).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn batch_items_are_independent() {
        let cfg = tiny();
        let model = Denoiser::new(cfg.clone(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c1 = full_cond(&cfg, &mut rng);
        let c2 = ConditionBundle::empty();
        let x1 = gaussian(&[cfg.window, cfg.motion_dim()], &mut rng);
        let x2 = gaussian(&[cfg.window, cfg.motion_dim()], &mut rng);
        let both = model
            .predict_x0(&[
                DenoiseRequest { x_t: &x1, t: 5, cond: &c1 },
                DenoiseRequest { x_t: &x2, t: 900, cond: &c2 },
            ])
            .unwrap();
        let one = model.predict_x0(&[DenoiseRequest { x_t: &x2, t: 900, cond: &c2 }]).unwrap();
        for (a, b) in both[1].data().iter().zip(one[0].data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn null_tokens_change_the_prediction() {
        let cfg = tiny();
        let model = Denoiser::new(cfg.clone(), 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cond = full_cond(&cfg, &mut rng);
        let x = gaussian(&[cfg.window, cfg.motion_dim()], &mut rng);
        let full = model.predict_x0(&[DenoiseRequest { x_t: &x, t: 50, cond: &cond }]).unwrap();
        for c in crate::conditioning::Condition::ALL {
            let dropped = cond.without(c);
            let out = model.predict_x0(&[DenoiseRequest { x_t: &x, t: 50, cond: &dropped }]).unwrap();
            assert_ne!(out, full, "{c:?}");
        }
    }

    #[test]
    fn frame_count_mismatch_is_shape_error() {
        let cfg = tiny();
        let model = Denoiser::new(cfg.clone(), 1).unwrap();
        let x = Tensor::zeros([cfg.window + 1, cfg.motion_dim()]);
        let cond = ConditionBundle::empty();
        let err = model.predict_x0(&[DenoiseRequest { x_t: &x, t: 1, cond: &cond }]).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn lipschitz_sane() {
        let cfg = tiny();
        let model = Denoiser::new(cfg.clone(), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cond = full_cond(&cfg, &mut rng);
        let x = gaussian(&[cfg.window, cfg.motion_dim()], &mut rng);
        let eps = 1e-5;
        let dir = gaussian(x.shape(), &mut rng);
        let xp = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(dir.data()).map(|(a, d)| a + eps * d).collect(),
        )
        .unwrap();
        let y0 = &model.predict_x0(&[DenoiseRequest { x_t: &x, t: 40, cond: &cond }]).unwrap()[0];
        let y1 = &model.predict_x0(&[DenoiseRequest { x_t: &xp, t: 40, cond: &cond }]).unwrap()[0];
        let dy: f64 = y0.data().iter().zip(y1.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let dx: f64 = eps * dir.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(dy / dx < 1e3, "ratio {}", dy / dx);
    }
}
