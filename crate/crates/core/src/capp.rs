//! Contrastive audio/pose pretraining (CAPP): two transformer encoders
//! trained so paired audio and pose windows embed close together, and the
//! alignment score and sensitivity studies built on them.
//!
//! Pose input per frame is `[pose - window mean, pose - previous pose]`
//! (the first frame's difference is zero), standardized with statistics
//! fitted on the training set. Audio input is the raw feature frame,
//! standardized the same way. Each encoder is input projection, sinusoidal
//! positions, pre-norm blocks, final norm, mean pooling over frames and a
//! linear head, followed by L2 normalization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_table, LayerNorm, Linear, TransformerBlock};
use crate::optim::{Adam, AdamConfig};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::train::{iteration_rng, LossRecord};
use crate::world::WorldSample;

pub const CAPP_KIND: &str = "capp";
/// Rotation and translation channels at the front of each motion frame.
pub const POSE_DIM: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CappConfig {
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    /// Width of the unit-norm output embedding.
    pub out_dim: usize,
    /// Window length in seconds; frames = round(seconds * frame_rate).
    pub seconds: f64,
    pub init_temperature: f64,
    /// Floor the learned temperature is clamped to after every step.
    pub min_temperature: f64,
    pub batch_size: usize,
    /// Windows drawn from the same sequence per batch group, so nearby
    /// offsets of one recording act as negatives for each other.
    pub group_size: usize,
    /// Frames between consecutive windows of a group.
    pub group_stride: usize,
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for CappConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            embed_dim: 64,
            heads: 4,
            out_dim: 64,
            seconds: 3.0,
            init_temperature: 0.1,
            min_temperature: 0.1,
            batch_size: 64,
            group_size: 8,
            group_stride: 2,
            iterations: 1000,
            lr: 2e-3,
            seed: 2,
            log_every: 100,
        }
    }
}

impl CappConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.out_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad("capp needs layers, heads and out_dim > 0 and embed_dim divisible by heads".into());
        }
        if !(self.seconds > 0.0) || !(self.min_temperature > 0.0) || !(self.lr > 0.0) {
            return bad("capp seconds, min_temperature and lr must be positive".into());
        }
        if !(self.init_temperature >= self.min_temperature) {
            return bad("capp init_temperature must be at least min_temperature".into());
        }
        if self.batch_size < 2 || self.log_every == 0 {
            return bad("capp batch_size must be at least 2 and log_every positive".into());
        }
        if self.group_size == 0 || (self.group_size > 1 && self.group_stride == 0) {
            return bad("capp group_size must be positive, with a positive group_stride when above 1".into());
        }
        Ok(())
    }

    /// Window length in frames at `frame_rate`.
    pub fn window(&self, frame_rate: usize) -> usize {
        ((self.seconds * frame_rate as f64).round() as usize).max(2)
    }
}

/// Pose encoder input for one window of pose frames `[L, 6]`: the
/// frame-to-frame differences, zero for the first frame. Absolute pose
/// levels drift slowly and would let shifted windows match.
pub fn pose_features(pose: &Tensor) -> Tensor {
    let (l, p) = (pose.rows(), pose.cols());
    let mut out = Tensor::zeros([l, p]);
    for r in 1..l {
        for j in 0..p {
            out.row_mut(r)[j] = pose.row(r)[j] - pose.row(r - 1)[j];
        }
    }
    out
}

/// Scales every frame-to-frame difference by `factor`, reintegrating from
/// the first frame.
pub fn rescale_pose(pose: &Tensor, factor: f64) -> Result<Tensor> {
    if !(factor > 0.0) {
        return Err(Error::contract(format!("pose scale factor must be positive, got {factor}")));
    }
    let mut out = pose.clone();
    let p = pose.cols();
    for r in 1..pose.rows() {
        for j in 0..p {
            let d = pose.row(r)[j] - pose.row(r - 1)[j];
            out.row_mut(r)[j] = out.row(r - 1)[j] + factor * d;
        }
    }
    Ok(out)
}

/// Transformer over a window, pooled to one unit vector.
#[derive(Clone, Debug)]
pub struct SequenceEncoder {
    input: Linear,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    head: Linear,
}

impl SequenceEncoder {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, cfg: &CappConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.embed_dim;
        Ok(Self {
            input: Linear::new(store, &format!("{name}.input"), in_dim, d, rng)?,
            blocks: (0..cfg.layers)
                .map(|i| TransformerBlock::new(store, &format!("{name}.block{i}"), d, cfg.heads, rng))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), d)?,
            head: Linear::new(store, &format!("{name}.head"), d, cfg.out_dim, rng)?,
        })
    }

    /// `x` is `[batch * len, in_dim]`, `positions` is `[batch * len, embed_dim]`;
    /// returns `[batch, out_dim]` unit rows.
    pub fn forward(&self, g: &mut Graph, x: Var, positions: Var, batch: usize) -> Result<Var> {
        let h = self.input.forward(g, x)?;
        let mut h = g.add(h, positions)?;
        for b in &self.blocks {
            h = b.forward(g, h, batch)?;
        }
        let h = self.norm.forward(g, h)?;
        let pooled = g.mean_pool(h, batch)?;
        let e = self.head.forward(g, pooled)?;
        Ok(g.l2_normalize_rows(e))
    }
}

/// Embeds paired pose and audio windows.
pub trait PairEncoder: Sync {
    /// Frames per window.
    fn window(&self) -> usize;

    /// One unit vector per pose window `[L, 6]`.
    fn embed_pose(&self, windows: &[Tensor]) -> Result<Vec<Vec<f64>>>;

    /// One unit vector per audio window `[L, audio_dim]`.
    fn embed_audio(&self, windows: &[Tensor]) -> Result<Vec<Vec<f64>>>;
}

/// Per-feature standardization of encoder inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureScale {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScale {
    fn fit(rows: &[Tensor]) -> Result<Self> {
        let d = rows.first().map(Tensor::cols).ok_or_else(|| Error::InsufficientData("no windows".into()))?;
        let mut n = 0.0;
        let mut s = vec![0.0; d];
        let mut q = vec![0.0; d];
        for t in rows {
            for r in 0..t.rows() {
                for (j, v) in t.row(r).iter().enumerate() {
                    s[j] += v;
                    q[j] += v * v;
                }
                n += 1.0;
            }
        }
        let mean: Vec<f64> = s.iter().map(|v| v / n).collect();
        let std = q
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Ok(Self { mean, std })
    }

    fn apply(&self, t: &Tensor) -> Tensor {
        let mut out = t.clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        out
    }
}

pub struct CappModel {
    config: CappConfig,
    window: usize,
    audio_dim: usize,
    store: ParamStore,
    pose_encoder: SequenceEncoder,
    audio_encoder: SequenceEncoder,
    log_temperature: ParamId,
    pose_scale: FeatureScale,
    audio_scale: FeatureScale,
    positions: Tensor,
}

impl CappModel {
    pub fn new(config: CappConfig, window: usize, audio_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if window < 2 {
            return Err(Error::Config(format!("capp window must be at least 2 frames, got {window}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let pose_encoder = SequenceEncoder::new(&mut store, "pose", POSE_DIM, &config, &mut rng)?;
        let audio_encoder = SequenceEncoder::new(&mut store, "audio", audio_dim, &config, &mut rng)?;
        let log_temperature = store.add("log_temperature", Tensor::scalar(config.init_temperature.ln()))?;
        Ok(Self {
            positions: sinusoidal_table(window, config.embed_dim),
            pose_scale: FeatureScale {
                mean: vec![0.0; POSE_DIM],
                std: vec![1.0; POSE_DIM],
            },
            audio_scale: FeatureScale {
                mean: vec![0.0; audio_dim],
                std: vec![1.0; audio_dim],
            },
            config,
            window,
            audio_dim,
            store,
            pose_encoder,
            audio_encoder,
            log_temperature,
        })
    }

    pub fn config(&self) -> &CappConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn temperature(&self) -> f64 {
        self.store.value(self.log_temperature).item().exp()
    }

    /// Fits input standardization on training windows.
    pub fn fit_scales(&mut self, pose_windows: &[Tensor], audio_windows: &[Tensor]) -> Result<()> {
        let feats: Vec<Tensor> = pose_windows.iter().map(pose_features).collect();
        self.pose_scale = FeatureScale::fit(&feats)?;
        self.audio_scale = FeatureScale::fit(audio_windows)?;
        Ok(())
    }

    fn check(&self, windows: &[Tensor], dim: usize, what: &str) -> Result<()> {
        if windows.is_empty() {
            return Err(Error::contract(format!("no {what} windows")));
        }
        for w in windows {
            if w.shape() != [self.window, dim] {
                return Err(Error::Shape {
                    op: "capp window",
                    lhs: vec![self.window, dim],
                    rhs: w.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    fn encoder_input(&self, g: &mut Graph, windows: &[Tensor], pose: bool) -> Result<(Var, Var)> {
        let parts: Vec<Tensor> = if pose {
            self.check(windows, POSE_DIM, "pose")?;
            windows.iter().map(|w| self.pose_scale.apply(&pose_features(w))).collect()
        } else {
            self.check(windows, self.audio_dim, "audio")?;
            windows.iter().map(|w| self.audio_scale.apply(w)).collect()
        };
        let refs: Vec<&Tensor> = parts.iter().collect();
        let x = g.constant(Tensor::concat_rows(&refs)?);
        let reps: Vec<&Tensor> = (0..windows.len()).map(|_| &self.positions).collect();
        let pos = g.constant(Tensor::concat_rows(&reps)?);
        Ok((x, pos))
    }

    /// Records both encoders; returns `(pose, audio)` embeddings `[B, out_dim]`.
    pub fn forward(&self, g: &mut Graph, pose: &[Tensor], audio: &[Tensor]) -> Result<(Var, Var)> {
        let (px, ppos) = self.encoder_input(g, pose, true)?;
        let pe = self.pose_encoder.forward(g, px, ppos, pose.len())?;
        let (ax, apos) = self.encoder_input(g, audio, false)?;
        let ae = self.audio_encoder.forward(g, ax, apos, audio.len())?;
        Ok((pe, ae))
    }

    /// Contrastive loss of one batch of aligned windows.
    pub fn loss(&self, g: &mut Graph, pose: &[Tensor], audio: &[Tensor]) -> Result<Var> {
        let (pe, ae) = self.forward(g, pose, audio)?;
        let lt = g.param(self.log_temperature);
        contrastive_loss(g, pe, ae, lt)
    }

    fn embed(&self, windows: &[Tensor], pose: bool) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(windows.len());
        // Bounded chunks keep inference memory flat for large eval sets.
        for chunk in windows.chunks(128) {
            let mut g = Graph::inference(&self.store);
            let (x, pos) = self.encoder_input(&mut g, chunk, pose)?;
            let enc = if pose { &self.pose_encoder } else { &self.audio_encoder };
            let e = enc.forward(&mut g, x, pos, chunk.len())?;
            g.check_finite()?;
            let t = g.value(e);
            out.extend((0..t.rows()).map(|r| t.row(r).to_vec()));
        }
        Ok(out)
    }

    pub fn save(&self) -> Result<Archive> {
        let mut a = Archive::from_params(&self.store);
        a.push("scale.pose.mean", Tensor::new([POSE_DIM], self.pose_scale.mean.clone())?);
        a.push("scale.pose.std", Tensor::new([POSE_DIM], self.pose_scale.std.clone())?);
        a.push("scale.audio.mean", Tensor::new([self.audio_dim], self.audio_scale.mean.clone())?);
        a.push("scale.audio.std", Tensor::new([self.audio_dim], self.audio_scale.std.clone())?);
        a.set_meta("kind", CAPP_KIND);
        a.set_meta("capp_window", self.window);
        a.set_meta("audio_dim", self.audio_dim);
        a.put_config("capp", &self.config)?;
        Ok(a)
    }

    pub fn load(a: &Archive) -> Result<Self> {
        if a.meta("kind") != Some(CAPP_KIND) {
            return Err(Error::Format(format!("expected a {CAPP_KIND} checkpoint, found kind {:?}", a.meta("kind"))));
        }
        let config: CappConfig = a.get_config("capp")?;
        let window = a.meta_f64("capp_window")? as usize;
        let audio_dim = a.meta_f64("audio_dim")? as usize;
        let mut model = Self::new(config, window, audio_dim, 0)?;
        let mut store = ParamStore::new();
        for p in model.store.iter() {
            let t = a
                .get(p.name())
                .ok_or_else(|| Error::Incompatible(format!("capp checkpoint lacks parameter {}", p.name())))?;
            store.add(p.name(), t.clone())?;
        }
        model.store.load_values(&store)?;
        model.pose_scale = FeatureScale {
            mean: a.require("scale.pose.mean")?.data().to_vec(),
            std: a.require("scale.pose.std")?.data().to_vec(),
        };
        model.audio_scale = FeatureScale {
            mean: a.require("scale.audio.mean")?.data().to_vec(),
            std: a.require("scale.audio.std")?.data().to_vec(),
        };
        Ok(model)
    }
}

impl PairEncoder for CappModel {
    fn window(&self) -> usize {
        self.window
    }

    fn embed_pose(&self, windows: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        self.embed(windows, true)
    }

    fn embed_audio(&self, windows: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        self.embed(windows, false)
    }
}

/// Symmetric cross-entropy over the `B x B` similarity matrix of unit rows
/// `pose` and `audio`, with logits `sim / exp(log_temperature)`. Row `i`
/// of each side is the positive for row `i` of the other.
pub fn contrastive_loss(g: &mut Graph, pose: Var, audio: Var, log_temperature: Var) -> Result<Var> {
    let b = g.value(pose).rows();
    if b < 2 {
        return Err(Error::contract(format!("contrastive loss needs at least 2 pairs, got {b}")));
    }
    let sim = g.matmul_nt(pose, audio)?;
    let neg = g.scale(log_temperature, -1.0);
    let inv_t = g.exp(neg);
    let logits = g.mul_scalar(sim, inv_t)?;
    let targets: Vec<usize> = (0..b).collect();
    let rows = g.cross_entropy_rows(logits, &targets)?;
    let cols = g.transpose(logits);
    let cols = g.cross_entropy_rows(cols, &targets)?;
    let both = g.add(rows, cols)?;
    Ok(g.scale(both, 0.5))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean cosine similarity of paired unit embeddings.
pub fn score_embeddings(pose: &[Vec<f64>], audio: &[Vec<f64>]) -> Result<f64> {
    if pose.is_empty() || pose.len() != audio.len() {
        return Err(Error::contract("capp score needs equal, non-empty pose and audio sets"));
    }
    Ok(pose.iter().zip(audio).map(|(p, a)| dot(p, a)).sum::<f64>() / pose.len() as f64)
}

/// Mean cosine similarity between each audio window and its paired pose window.
pub fn capp_score<E: PairEncoder + ?Sized>(model: &E, audio: &[Tensor], pose: &[Tensor]) -> Result<f64> {
    if audio.is_empty() || audio.len() != pose.len() {
        return Err(Error::contract("capp score needs equal, non-empty pose and audio sets"));
    }
    score_embeddings(&model.embed_pose(pose)?, &model.embed_audio(audio)?)
}

/// Aligned long sequences to cut evaluation windows from.
#[derive(Clone, Debug)]
pub struct PairSet {
    /// `[frames, audio_dim]` per sequence.
    pub audio: Vec<Tensor>,
    /// `[frames, 6]` per sequence.
    pub pose: Vec<Tensor>,
}

impl PairSet {
    pub fn from_samples(samples: &[WorldSample]) -> Result<Self> {
        Self::from_parts(
            samples.iter().map(|s| s.audio.tensor().clone()).collect(),
            samples.iter().map(|s| pose_channels(s.motion.tensor())).collect::<Result<_>>()?,
        )
    }

    pub fn from_parts(audio: Vec<Tensor>, pose: Vec<Tensor>) -> Result<Self> {
        if audio.is_empty() || audio.len() != pose.len() {
            return Err(Error::contract("pair set needs equal, non-empty audio and pose lists"));
        }
        for (a, p) in audio.iter().zip(&pose) {
            if a.rows() != p.rows() {
                return Err(Error::Shape {
                    op: "pair set",
                    lhs: a.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        Ok(Self { audio, pose })
    }

    /// Non-overlapping window starts per sequence leaving `margin` frames
    /// free at both ends.
    fn starts(&self, window: usize, margin: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, a) in self.audio.iter().enumerate() {
            let mut s = margin;
            while s + window + margin <= a.rows() {
                out.push((i, s));
                s += window;
            }
        }
        out
    }
}

/// The first six channels of motion frames.
pub fn pose_channels(motion: &Tensor) -> Result<Tensor> {
    if motion.cols() < POSE_DIM {
        return Err(Error::Shape {
            op: "pose channels",
            lhs: vec![POSE_DIM],
            rhs: motion.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros([motion.rows(), POSE_DIM]);
    for r in 0..motion.rows() {
        out.row_mut(r).copy_from_slice(&motion.row(r)[..POSE_DIM]);
    }
    Ok(out)
}

fn windows_at(set: &PairSet, starts: &[(usize, usize)], window: usize, shift: isize) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let mut audio = Vec::with_capacity(starts.len());
    let mut pose = Vec::with_capacity(starts.len());
    for &(i, s) in starts {
        audio.push(set.audio[i].slice_rows(s, window)?);
        pose.push(set.pose[i].slice_rows((s as isize + shift) as usize, window)?);
    }
    Ok((audio, pose))
}

/// Paired windows with the pose side offset by `max_shift` frames of margin.
fn eval_starts<E: PairEncoder + ?Sized>(model: &E, set: &PairSet, margin: usize) -> Result<Vec<(usize, usize)>> {
    let starts = set.starts(model.window(), margin);
    if starts.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no sequence is long enough for a {}-frame window with {margin} frames of margin",
            model.window()
        )));
    }
    Ok(starts)
}

/// Scores of aligned windows with the pose offset by each shift; `+k` and
/// `-k` are averaged and reported under `k`.
pub fn shift_sensitivity<E: PairEncoder + ?Sized>(model: &E, set: &PairSet, shifts: &[usize]) -> Result<Vec<(usize, f64)>> {
    let w = model.window();
    let max = shifts.iter().copied().max().unwrap_or(0);
    if max >= w {
        return Err(Error::contract(format!("shift {max} is not below the window length {w}")));
    }
    let starts = eval_starts(model, set, max)?;
    let (audio, _) = windows_at(set, &starts, w, 0)?;
    let audio_emb = model.embed_audio(&audio)?;
    let mut out = Vec::with_capacity(shifts.len());
    for &k in shifts {
        let score = if k == 0 {
            let (_, pose) = windows_at(set, &starts, w, 0)?;
            score_embeddings(&model.embed_pose(&pose)?, &audio_emb)?
        } else {
            let mut total = 0.0;
            for sign in [1isize, -1] {
                let (_, pose) = windows_at(set, &starts, w, sign * k as isize)?;
                total += score_embeddings(&model.embed_pose(&pose)?, &audio_emb)?;
            }
            total / 2.0
        };
        out.push((k, score));
    }
    Ok(out)
}

/// Score with every audio window paired to the pose window of the next
/// sequence (a derangement), so no pair is aligned.
pub fn mismatched_score<E: PairEncoder + ?Sized>(model: &E, set: &PairSet) -> Result<f64> {
    if set.audio.len() < 2 {
        return Err(Error::InsufficientData("mismatched pairs need at least two sequences".into()));
    }
    let w = model.window();
    let starts = eval_starts(model, set, 0)?;
    let (audio, pose) = windows_at(set, &starts, w, 0)?;
    let n = starts.len();
    // Rotate until every window is paired with a different sequence.
    let rot = (1..n)
        .find(|&r| (0..n).all(|i| starts[i].0 != starts[(i + r) % n].0))
        .ok_or_else(|| Error::InsufficientData("cannot derange windows across sequences".into()))?;
    let pose: Vec<Tensor> = (0..n).map(|i| pose[(i + rot) % n].clone()).collect();
    capp_score(model, &audio, &pose)
}

/// Scores with pose motion rescaled by each factor.
pub fn scale_sensitivity<E: PairEncoder + ?Sized>(model: &E, set: &PairSet, factors: &[f64]) -> Result<Vec<(f64, f64)>> {
    let w = model.window();
    let starts = eval_starts(model, set, 0)?;
    let (audio, pose) = windows_at(set, &starts, w, 0)?;
    let audio_emb = model.embed_audio(&audio)?;
    factors
        .iter()
        .map(|&f| {
            let scaled = pose.iter().map(|p| rescale_pose(p, f)).collect::<Result<Vec<_>>>()?;
            Ok((f, score_embeddings(&model.embed_pose(&scaled)?, &audio_emb)?))
        })
        .collect()
}

/// Random aligned training windows, in groups of up to `group` windows
/// from one sequence spaced `stride` frames apart.
fn training_batch(
    set: &PairSet,
    window: usize,
    batch: usize,
    group: usize,
    stride: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let mut audio = Vec::with_capacity(batch);
    let mut pose = Vec::with_capacity(batch);
    while audio.len() < batch {
        let i = rng.gen_range(0..set.audio.len());
        let free = set.audio[i].rows() - window;
        let n = group.min(batch - audio.len()).min(1 + free / stride.max(1));
        let span = (n - 1) * stride;
        let s = rng.gen_range(0..=free - span);
        for j in 0..n {
            let at = s + j * stride;
            audio.push(set.audio[i].slice_rows(at, window)?);
            pose.push(set.pose[i].slice_rows(at, window)?);
        }
    }
    Ok((audio, pose))
}

/// Trains a fresh model on `set`, calling `on_log` per logging block.
pub fn train_capp(
    config: CappConfig,
    window: usize,
    set: &PairSet,
    mut on_log: impl FnMut(&LossRecord) -> Result<()>,
) -> Result<CappModel> {
    config.validate()?;
    if set.audio.iter().any(|a| a.rows() < window) {
        return Err(Error::InsufficientData(format!("capp training needs sequences of at least {window} frames")));
    }
    let audio_dim = set.audio[0].cols();
    let mut model = CappModel::new(config.clone(), window, audio_dim, config.seed)?;
    {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5ca1e);
        let (a, p) = training_batch(set, window, 512, 1, 1, &mut rng)?;
        model.fit_scales(&p, &a)?;
    }
    let mut opt = Adam::new(AdamConfig {
        lr: config.lr,
        ..Default::default()
    });
    let mut block = (0.0, 0usize);
    for it in 0..config.iterations {
        let mut rng = iteration_rng(config.seed, it);
        let (audio, pose) = training_batch(set, window, config.batch_size, config.group_size, config.group_stride, &mut rng)?;
        let (loss, grads) = {
            let mut g = Graph::new(&model.store);
            let l = model.loss(&mut g, &pose, &audio)?;
            let loss = g.value(l).item();
            if !loss.is_finite() {
                return Err(Error::Training {
                    iteration: it + 1,
                    message: format!("capp loss is {loss}"),
                });
            }
            (loss, g.backward(l)?)
        };
        model.store.zero_grad();
        grads.accumulate_into(&mut model.store);
        let warm = 50.min(config.iterations.max(1));
        let lr = config.lr * ((it + 1) as f64 / warm as f64).min(1.0);
        opt.step_with_lr(&mut model.store, lr)?;
        let lt = model.store.get_mut(model.log_temperature).value_mut();
        lt.data_mut()[0] = lt.data()[0].max(config.min_temperature.ln());
        block.0 += loss;
        block.1 += 1;
        if (it + 1) % config.log_every == 0 {
            on_log(&LossRecord {
                iteration: it + 1,
                loss: block.0 / block.1 as f64,
            })?;
            block = (0.0, 0);
        }
    }
    Ok(model)
}
