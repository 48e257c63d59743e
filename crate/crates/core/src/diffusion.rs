//! Noise schedule, forward corruption, the x0-prediction objective,
//! multi-condition classifier-free guidance and the step-reducible
//! deterministic sampler.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::conditioning::{Condition, ConditionBundle};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Betas and cumulative products, indexed by timestep `t` in `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas spaced linearly from `beta_start` to `beta_end`.
    pub fn linear(cfg: &ScheduleConfig) -> Result<Self> {
        let t = cfg.steps;
        if t == 0 {
            return Err(Error::validation("schedule needs at least one step"));
        }
        let beta = (0..t)
            .map(|i| {
                if t == 1 {
                    cfg.beta_start
                } else {
                    cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (t - 1) as f64
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::validation("betas must lie in (0, 1)"));
        }
        let alpha_bar = beta
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { beta, alpha_bar })
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.len() {
            return Err(Error::contract(format!(
                "timestep {t} outside [1, {}]",
                self.len()
            )));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.check(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.check(t)?])
    }

    /// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise`.
    pub fn forward_sample(&self, x0: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        if x0.shape() != noise.shape() {
            return Err(Error::Shape {
                op: "forward_sample",
                lhs: x0.shape().to_vec(),
                rhs: noise.shape().to_vec(),
            });
        }
        let ab = self.alpha_bar(t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data = x0
            .data()
            .iter()
            .zip(noise.data())
            .map(|(x, n)| a * x + b * n)
            .collect();
        Tensor::new(x0.shape().to_vec(), data)
    }

    /// Evenly spaced descending grid of `steps` timesteps from `T` to `1`.
    /// `steps == T` gives every timestep; a single step uses `T` only.
    pub fn timestep_grid(&self, steps: usize) -> Result<Vec<usize>> {
        let t = self.len();
        if steps == 0 || steps > t {
            return Err(Error::contract(format!(
                "sampling steps {steps} outside [1, {t}]"
            )));
        }
        if steps == 1 {
            return Ok(vec![t]);
        }
        Ok((0..steps)
            .map(|i| {
                let x = t as f64 - i as f64 * (t - 1) as f64 / (steps - 1) as f64;
                x.round() as usize
            })
            .collect())
    }

    /// Deterministic x0-parameterized move from `x_t` to timestep `t_next`
    /// given the predicted clean sample.
    pub fn step_to(&self, x_t: &Tensor, t: usize, x0_hat: &Tensor, t_next: usize) -> Result<Tensor> {
        let ab = self.alpha_bar(t)?;
        let ab_next = self.alpha_bar(t_next)?;
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (na, nb) = (ab_next.sqrt(), (1.0 - ab_next).sqrt());
        let data = x_t
            .data()
            .iter()
            .zip(x0_hat.data())
            .map(|(&x, &x0)| {
                let eps = (x - sa * x0) / sb;
                na * x0 + nb * eps
            })
            .collect();
        Tensor::new(x_t.shape().to_vec(), data)
    }
}

pub fn gaussian(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(rng))
}

/// Per-condition guidance scales.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CfgScales {
    pub lambda_a: f64,
    pub lambda_g: f64,
    pub lambda_d: f64,
    pub lambda_e: f64,
    pub lambda_pre: f64,
}

impl Default for CfgScales {
    fn default() -> Self {
        Self {
            lambda_a: 0.5,
            lambda_g: 1.0,
            lambda_d: 0.0,
            lambda_e: 0.0,
            lambda_pre: 0.0,
        }
    }
}

impl CfgScales {
    pub const ZERO: CfgScales = CfgScales {
        lambda_a: 0.0,
        lambda_g: 0.0,
        lambda_d: 0.0,
        lambda_e: 0.0,
        lambda_pre: 0.0,
    };

    pub fn get(&self, c: Condition) -> f64 {
        match c {
            Condition::Audio => self.lambda_a,
            Condition::Gaze => self.lambda_g,
            Condition::Distance => self.lambda_d,
            Condition::Emotion => self.lambda_e,
            Condition::Carry => self.lambda_pre,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for c in Condition::ALL {
            let v = self.get(c);
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("CFG scale for {c:?} is {v}")));
            }
        }
        Ok(())
    }

    /// Conditions with a nonzero scale that are present in `cond`; guidance
    /// is only applied over these.
    pub fn active(&self, cond: &ConditionBundle) -> Vec<Condition> {
        Condition::ALL
            .into_iter()
            .filter(|&c| self.get(c) != 0.0 && cond.has(c))
            .collect()
    }
}

/// `(1 + sum l_c) full - sum l_c dropped[c]`, exactly.
pub fn cfg_combine(
    dropped: &BTreeMap<Condition, Tensor>,
    full: &Tensor,
    scales: &CfgScales,
) -> Result<Tensor> {
    let mut out = full.clone();
    let total: f64 = Condition::ALL.iter().map(|&c| scales.get(c)).sum();
    if total == 0.0 {
        return Ok(out);
    }
    out.data_mut().iter_mut().for_each(|v| *v *= 1.0 + total);
    for c in Condition::ALL {
        let l = scales.get(c);
        if l == 0.0 {
            continue;
        }
        let d = dropped.get(&c).ok_or_else(|| {
            Error::contract(format!("no condition-dropped output for {c:?} (scale {l})"))
        })?;
        if d.shape() != full.shape() {
            return Err(Error::Shape {
                op: "cfg_combine",
                lhs: full.shape().to_vec(),
                rhs: d.shape().to_vec(),
            });
        }
        out.data_mut()
            .iter_mut()
            .zip(d.data())
            .for_each(|(o, v)| *o -= l * v);
    }
    Ok(out)
}

/// One denoiser evaluation: noisy window, its timestep and its conditions.
#[derive(Clone, Copy)]
pub struct DenoiseRequest<'a> {
    pub x_t: &'a Tensor,
    pub t: usize,
    pub cond: &'a ConditionBundle,
}

/// Frozen-weight clean-sample predictor `H(X^t, t, C)`.
pub trait Denoise: Sync {
    /// Frames per window.
    fn window(&self) -> usize;

    /// Values per frame.
    fn frame_dim(&self) -> usize;

    /// Carry-over frames `K` conditioned on from the previous window; 0
    /// when the model takes no carry.
    fn overlap(&self) -> usize {
        0
    }

    /// Predicted `X^0` for each request, in model space.
    fn predict_x0(&self, batch: &[DenoiseRequest<'_>]) -> Result<Vec<Tensor>>;

    /// Maps data-space motion into the space the diffusion runs in.
    fn encode_motion(&self, raw: &Tensor) -> Tensor {
        raw.clone()
    }

    /// Inverse of [`Denoise::encode_motion`].
    fn decode_motion(&self, model: &Tensor) -> Tensor {
        model.clone()
    }
}

/// A denoiser whose forward pass can be recorded for training.
pub trait GraphDenoiser: Denoise {
    fn params(&self) -> &ParamStore;

    /// Records the forward pass; returns `[batch * window, frame_dim]`.
    fn forward<'g>(&'g self, g: &mut Graph<'g>, batch: &[DenoiseRequest<'_>]) -> Result<Var>;
}

/// Runs a graph denoiser in inference mode and splits the batch.
pub fn predict_with_graph<D: GraphDenoiser + ?Sized>(
    model: &D,
    batch: &[DenoiseRequest<'_>],
) -> Result<Vec<Tensor>> {
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = Graph::inference(model.params());
    let out = model.forward(&mut g, batch)?;
    g.check_finite()?;
    let w = model.window();
    let t = g.value(out);
    (0..batch.len()).map(|i| t.slice_rows(i * w, w)).collect()
}

/// Counts denoiser evaluations (one per request).
pub struct CountingDenoiser<'a, D: ?Sized> {
    inner: &'a D,
    calls: AtomicUsize,
}

impl<'a, D: Denoise + ?Sized> CountingDenoiser<'a, D> {
    pub fn new(inner: &'a D) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<D: Denoise + ?Sized> Denoise for CountingDenoiser<'_, D> {
    fn window(&self) -> usize {
        self.inner.window()
    }

    fn frame_dim(&self) -> usize {
        self.inner.frame_dim()
    }

    fn overlap(&self) -> usize {
        self.inner.overlap()
    }

    fn predict_x0(&self, batch: &[DenoiseRequest<'_>]) -> Result<Vec<Tensor>> {
        self.calls.fetch_add(batch.len(), Ordering::Relaxed);
        self.inner.predict_x0(batch)
    }

    fn encode_motion(&self, raw: &Tensor) -> Tensor {
        self.inner.encode_motion(raw)
    }

    fn decode_motion(&self, model: &Tensor) -> Tensor {
        self.inner.decode_motion(model)
    }
}

/// A training example in model space.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub x0: Tensor,
    pub cond: ConditionBundle,
}

/// Records the x0-prediction objective for a minibatch: per example,
/// `t ~ U[1, T]`, `noise ~ N(0, I)`, then the mean squared error between
/// `x0` and `H(x_t, t, C)` averaged over all entries.
pub fn training_loss<'g, D: GraphDenoiser + ?Sized>(
    model: &'g D,
    g: &mut Graph<'g>,
    schedule: &NoiseSchedule,
    batch: &[TrainExample],
    rng: &mut impl Rng,
) -> Result<Var> {
    let draws: Vec<(usize, Tensor)> = batch
        .iter()
        .map(|ex| {
            let t = rng.gen_range(1..=schedule.len());
            (t, gaussian(ex.x0.shape(), rng))
        })
        .collect();
    loss_at(model, g, schedule, batch, &draws)
}

/// The objective at fixed `(t, noise)` per example.
pub fn loss_at<'g, D: GraphDenoiser + ?Sized>(
    model: &'g D,
    g: &mut Graph<'g>,
    schedule: &NoiseSchedule,
    batch: &[TrainExample],
    draws: &[(usize, Tensor)],
) -> Result<Var> {
    if batch.is_empty() || batch.len() != draws.len() {
        return Err(Error::contract("loss needs one (t, noise) draw per example"));
    }
    let noisy: Vec<Tensor> = batch
        .iter()
        .zip(draws)
        .map(|(ex, (t, n))| schedule.forward_sample(&ex.x0, *t, n))
        .collect::<Result<_>>()?;
    let requests: Vec<DenoiseRequest> = batch
        .iter()
        .zip(draws)
        .zip(&noisy)
        .map(|((ex, (t, _)), x_t)| DenoiseRequest {
            x_t,
            t: *t,
            cond: &ex.cond,
        })
        .collect();
    let pred = model.forward(g, &requests)?;
    let targets: Vec<&Tensor> = batch.iter().map(|ex| &ex.x0).collect();
    let target = Tensor::concat_rows(&targets)?;
    g.mse(pred, &target)
}

/// Guided sampling of one window; see [`sample_batch`].
pub fn sample<D: Denoise + ?Sized, R: Rng>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    cond: &ConditionBundle,
    scales: &CfgScales,
    steps: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let mut out = sample_batch(denoiser, schedule, &[cond], scales, steps, std::slice::from_mut(rng))?;
    Ok(out.pop().expect("one sample"))
}

/// Guided sampling of several independent windows in lockstep.
///
/// Each window starts from its own standard Gaussian draw at `t = T` and
/// walks the `steps`-point grid. At every grid point the guided clean
/// estimate is formed from one full-condition call plus one call per
/// active (nonzero-scale, present) condition, then moved to the next grid
/// point with the deterministic x0-parameterized update. The final clean
/// estimate is returned, in model space.
pub fn sample_batch<D: Denoise + ?Sized, R: Rng>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    conds: &[&ConditionBundle],
    scales: &CfgScales,
    steps: usize,
    rngs: &mut [R],
) -> Result<Vec<Tensor>> {
    scales.validate()?;
    if conds.len() != rngs.len() {
        return Err(Error::contract("one rng per sampled window"));
    }
    let grid = schedule.timestep_grid(steps)?;
    let shape = [denoiser.window(), denoiser.frame_dim()];
    let mut xs: Vec<Tensor> = rngs.iter_mut().map(|r| gaussian(&shape, r)).collect();

    // Per window: the full bundle followed by one dropped bundle per
    // active condition.
    let plans: Vec<(Vec<Condition>, Vec<ConditionBundle>)> = conds
        .iter()
        .map(|c| {
            let active = scales.active(c);
            let variants = active.iter().map(|&a| c.without(a)).collect();
            (active, variants)
        })
        .collect();

    let mut x0_hat = Vec::new();
    for (i, &t) in grid.iter().enumerate() {
        let mut requests = Vec::new();
        for ((x, cond), (_, variants)) in xs.iter().zip(conds).zip(&plans) {
            requests.push(DenoiseRequest { x_t: x, t, cond });
            requests.extend(variants.iter().map(|v| DenoiseRequest { x_t: x, t, cond: v }));
        }
        let mut preds = denoiser.predict_x0(&requests)?.into_iter();
        x0_hat.clear();
        for (active, _) in &plans {
            let full = preds.next().expect("full prediction");
            let mut dropped = BTreeMap::new();
            let mut eff = CfgScales::ZERO;
            for &c in active {
                dropped.insert(c, preds.next().expect("dropped prediction"));
                set_scale(&mut eff, c, scales.get(c));
            }
            x0_hat.push(cfg_combine(&dropped, &full, &eff)?);
        }
        if let Some(&t_next) = grid.get(i + 1) {
            for (x, x0) in xs.iter_mut().zip(&x0_hat) {
                *x = schedule.step_to(x, t, x0, t_next)?;
            }
        }
    }
    Ok(x0_hat)
}

fn set_scale(s: &mut CfgScales, c: Condition, v: f64) {
    match c {
        Condition::Audio => s.lambda_a = v,
        Condition::Gaze => s.lambda_g = v,
        Condition::Distance => s.lambda_d = v,
        Condition::Emotion => s.lambda_e = v,
        Condition::Carry => s.lambda_pre = v,
    }
}
