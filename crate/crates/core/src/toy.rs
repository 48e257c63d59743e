//! Unconditional single-frame diffusion on low-dimensional data, used to
//! check that training plus sampling recovers a known distribution.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::autograd::{Graph, Var};
use crate::conditioning::ConditionBundle;
use crate::diffusion::{
    gaussian, predict_with_graph, training_loss, Denoise, DenoiseRequest, GraphDenoiser, NoiseSchedule, TrainExample,
};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal, Linear};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Isotropic Gaussian mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    pub means: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub std: f64,
}

impl GaussianMixture {
    /// Two equally weighted modes at `(-1.5, -1)` and `(1.5, 1)`, std 0.3.
    pub fn two_modes() -> Self {
        Self {
            means: vec![vec![-1.5, -1.0], vec![1.5, 1.0]],
            weights: vec![0.5, 0.5],
            std: 0.3,
        }
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut k = self.means.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let noise = gaussian(&[self.dim()], rng);
        self.means[k].iter().zip(noise.data()).map(|(m, n)| m + self.std * n).collect()
    }

    /// Index of the nearest mode.
    pub fn nearest_mode(&self, x: &[f64]) -> usize {
        let dist = |m: &Vec<f64>| m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        (0..self.means.len())
            .min_by(|&a, &b| dist(&self.means[a]).total_cmp(&dist(&self.means[b])))
            .expect("at least one mode")
    }
}

/// 1-Wasserstein distance between two equally sized 1-D samples.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::contract("wasserstein1 needs two non-empty samples of equal size"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyConfig {
    pub dim: usize,
    pub hidden: usize,
    pub time_dim: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            hidden: 128,
            time_dim: 32,
        }
    }
}

/// MLP `x0`-predictor with a one-frame window. Conditions are ignored.
///
/// The output is `sqrt(abar_t) x_t + sqrt(1 - abar_t) F(x_t, t)`, where `F`
/// is an MLP over `[x_t, sinusoidal(t)]`: the skip term is the optimal
/// linear estimate for unit-variance data, so `F` only learns the
/// correction.
pub struct ToyDenoiser {
    config: ToyConfig,
    alpha_bar: Vec<f64>,
    store: ParamStore,
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

impl ToyDenoiser {
    pub fn new(config: ToyConfig, schedule: &NoiseSchedule, seed: u64) -> Result<Self> {
        let alpha_bar = (1..=schedule.len()).map(|t| schedule.alpha_bar(t)).collect::<Result<_>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = config.hidden;
        let l1 = Linear::new(&mut store, "toy.l1", config.dim + config.time_dim, h, &mut rng)?;
        let l2 = Linear::new(&mut store, "toy.l2", h, h, &mut rng)?;
        let l3 = Linear::new(&mut store, "toy.l3", h, config.dim, &mut rng)?;
        Ok(Self {
            config,
            alpha_bar,
            store,
            l1,
            l2,
            l3,
        })
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

impl Denoise for ToyDenoiser {
    fn window(&self) -> usize {
        1
    }

    fn frame_dim(&self) -> usize {
        self.config.dim
    }

    fn predict_x0(&self, batch: &[DenoiseRequest<'_>]) -> Result<Vec<Tensor>> {
        predict_with_graph(self, batch)
    }
}

impl GraphDenoiser for ToyDenoiser {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn forward<'g>(&'g self, g: &mut Graph<'g>, batch: &[DenoiseRequest<'_>]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::contract("empty denoiser batch"));
        }
        let (d, td) = (self.config.dim, self.config.time_dim);
        let mut input = Vec::with_capacity(batch.len() * (d + td));
        let mut skip = Vec::with_capacity(batch.len() * d);
        let mut gain = Vec::with_capacity(batch.len() * d);
        for r in batch {
            let ab = *self
                .alpha_bar
                .get(r.t.wrapping_sub(1))
                .ok_or_else(|| Error::contract(format!("timestep {} outside [1, {}]", r.t, self.alpha_bar.len())))?;
            if r.x_t.shape() != [1, d] {
                return Err(Error::Shape {
                    op: "toy denoise input",
                    lhs: vec![1, d],
                    rhs: r.x_t.shape().to_vec(),
                });
            }
            input.extend_from_slice(r.x_t.data());
            input.extend(sinusoidal(r.t as f64, td));
            skip.extend(r.x_t.data().iter().map(|v| ab.sqrt() * v));
            gain.extend(std::iter::repeat((1.0 - ab).sqrt()).take(d));
        }
        let n = batch.len();
        let x = g.constant(Tensor::new([n, d + td], input)?);
        let h = self.l1.forward(g, x)?;
        let h = g.silu(h);
        let h = self.l2.forward(g, h)?;
        let h = g.silu(h);
        let f = self.l3.forward(g, h)?;
        let gain = g.constant(Tensor::new([n, d], gain)?);
        let f = g.mul(f, gain)?;
        let skip = g.constant(Tensor::new([n, d], skip)?);
        g.add(f, skip)
    }
}

/// Trains `model` on fresh mixture draws every iteration; returns the mean
/// loss of the last 100 iterations.
pub fn train_toy(
    model: &mut ToyDenoiser,
    target: &GaussianMixture,
    schedule: &NoiseSchedule,
    iterations: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    let mut opt = Adam::new(AdamConfig {
        lr,
        ..Default::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let empty = ConditionBundle::empty();
    let mut recent = std::collections::VecDeque::with_capacity(100);
    for it in 0..iterations {
        let batch: Vec<TrainExample> = (0..batch_size)
            .map(|_| TrainExample {
                x0: Tensor::new([1, target.dim()], target.sample(&mut rng)).expect("toy frame"),
                cond: empty.clone(),
            })
            .collect();
        let (loss, grads) = {
            let mut g = Graph::new(&model.store);
            let l = training_loss(&*model, &mut g, schedule, &batch, &mut rng)?;
            (g.value(l).item(), g.backward(l)?)
        };
        model.store.zero_grad();
        grads.accumulate_into(&mut model.store);
        // Cosine decay keeps the late iterations from jittering the fit.
        let progress = it as f64 / iterations.max(1) as f64;
        let lr_t = lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        opt.step_with_lr(&mut model.store, lr_t.max(lr * 0.01))?;
        if recent.len() == 100 {
            recent.pop_front();
        }
        recent.push_back(loss);
    }
    Ok(recent.iter().sum::<f64>() / recent.len().max(1) as f64)
}
