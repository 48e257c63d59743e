use motiondiff::autograd::Graph;
use motiondiff::conditioning::{AudioCondition, Carry, ConditionBundle, DropoutPolicy, Gaze};
use motiondiff::diffusion::*;
use motiondiff::sequence::{AudioFeatureSequence, MotionSequence};
use motiondiff::toy::{ToyConfig, ToyDenoiser};
use motiondiff::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(&ScheduleConfig::default()).unwrap()
}

#[test]
fn forward_sample_moments_match_closed_form() {
    let s = schedule();
    let x0 = Tensor::new([1, 3], vec![1.0, -2.0, 0.5]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 10_000;
    for t in [1, 250, 500, 1000] {
        let ab = s.alpha_bar(t).unwrap();
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..n {
            let noise = gaussian(&[1, 3], &mut rng);
            let x = s.forward_sample(&x0, t, &noise).unwrap();
            for j in 0..3 {
                sum[j] += x.data()[j];
                sq[j] += x.data()[j] * x.data()[j];
            }
        }
        let var = 1.0 - ab;
        for j in 0..3 {
            let mean = sum[j] / n as f64;
            let se = (var / n as f64).sqrt();
            assert!((mean - ab.sqrt() * x0.data()[j]).abs() < 3.0 * se.max(1e-12), "t={t} mean {mean}");
            let v = sq[j] / n as f64 - mean * mean;
            // Standard error of a Gaussian sample variance.
            let se_v = var * (2.0 / n as f64).sqrt();
            assert!((v - var).abs() < 3.0 * se_v.max(1e-12), "t={t} var {v} vs {var}");
        }
    }
}

#[test]
fn training_loss_matches_external_mse() {
    let s = schedule();
    let model = ToyDenoiser::new(ToyConfig::default(), &s, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch: Vec<TrainExample> = (0..6)
        .map(|_| TrainExample {
            x0: gaussian(&[1, 2], &mut rng),
            cond: ConditionBundle::empty(),
        })
        .collect();
    let draws: Vec<(usize, Tensor)> = (0..6).map(|i| (1 + 150 * i, gaussian(&[1, 2], &mut rng))).collect();
    let loss = {
        let mut g = Graph::new(model.params());
        let l = loss_at(&model, &mut g, &s, &batch, &draws).unwrap();
        g.value(l).item()
    };
    let mut total = 0.0;
    for (ex, (t, n)) in batch.iter().zip(&draws) {
        let ab = s.alpha_bar(*t).unwrap();
        let x_t: Vec<f64> = ex.x0.data().iter().zip(n.data()).map(|(x, e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e).collect();
        let x_t = Tensor::new([1, 2], x_t).unwrap();
        let pred = model
            .predict_x0(&[DenoiseRequest {
                x_t: &x_t,
                t: *t,
                cond: &ex.cond,
            }])
            .unwrap();
        total += pred[0].data().iter().zip(ex.x0.data()).map(|(p, x)| (p - x) * (p - x)).sum::<f64>();
    }
    let expect = total / 12.0;
    assert!((loss - expect).abs() < 1e-12 * expect.max(1.0), "{loss} vs {expect}");
}

fn full_bundle() -> ConditionBundle {
    ConditionBundle {
        audio: Some(AudioCondition::full(AudioFeatureSequence::from_vec(8, 2, vec![0.1; 16]).unwrap())),
        gaze: Some(Gaze::new(0.1, 0.0)),
        distance: Some(1.0),
        emotion: Some(vec![0.0; 3]),
        carry: Some(Carry {
            motion: MotionSequence::from_vec(2, 4, vec![0.0; 8]).unwrap(),
            audio: AudioFeatureSequence::from_vec(2, 2, vec![0.0; 4]).unwrap(),
        }),
    }
}

#[test]
fn dropout_rates_match_nominal_over_100k_draws() {
    let policy = DropoutPolicy::default();
    let full = full_bundle();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 100_000;
    let mut counts = [0usize; 6];
    let mut kept_audio = 0usize;
    for _ in 0..n {
        let b = policy.apply(&full, &mut rng);
        counts[0] += b.audio.is_none() as usize;
        counts[1] += b.gaze.is_none() as usize;
        counts[2] += b.distance.is_none() as usize;
        counts[3] += b.emotion.is_none() as usize;
        counts[4] += b.carry.is_none() as usize;
        if let Some(a) = &b.audio {
            kept_audio += 1;
            counts[5] += (a.present < 8) as usize;
        }
    }
    let rate = |c: usize, of: usize| c as f64 / of as f64;
    for (i, c) in counts[..4].iter().enumerate() {
        assert!((rate(*c, n) - 0.1).abs() < 0.005, "condition {i}: {}", rate(*c, n));
    }
    assert!((rate(counts[4], n) - 0.5).abs() < 0.005, "carry: {}", rate(counts[4], n));
    assert!((rate(counts[5], kept_audio) - 0.1).abs() < 0.005, "tail: {}", rate(counts[5], kept_audio));
}

#[test]
fn carry_drops_as_a_unit() {
    let policy = DropoutPolicy::default();
    let full = full_bundle();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let b = policy.apply(&full, &mut rng);
        if let Some(c) = b.carry {
            assert_eq!(Some(c), full.carry);
        }
    }
}

struct Zero;

impl Denoise for Zero {
    fn window(&self) -> usize {
        4
    }

    fn frame_dim(&self) -> usize {
        2
    }

    fn predict_x0(&self, batch: &[DenoiseRequest<'_>]) -> Result<Vec<Tensor>> {
        Ok(batch.iter().map(|r| r.x_t.map(|v| 0.3 * v)).collect())
    }
}

#[test]
fn denoiser_calls_are_steps_times_one_plus_active() {
    let s = schedule();
    let cond = full_bundle();
    let cases = [
        (CfgScales::ZERO, 1),
        (CfgScales::default(), 3),
        (
            CfgScales {
                lambda_pre: 1.0,
                lambda_e: 0.5,
                ..CfgScales::default()
            },
            5,
        ),
    ];
    for (scales, per_step) in cases {
        for steps in [1, 10, 50] {
            let counter = CountingDenoiser::new(&Zero);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            sample(&counter, &s, &cond, &scales, steps, &mut rng).unwrap();
            assert_eq!(counter.calls(), steps * per_step);
        }
    }
    // A scaled condition that is absent is not guided.
    let counter = CountingDenoiser::new(&Zero);
    let no_gaze = cond.without(motiondiff::conditioning::Condition::Gaze);
    sample(&counter, &s, &no_gaze, &CfgScales::default(), 10, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    assert_eq!(counter.calls(), 20);
}

#[test]
fn ten_steps_cost_a_fifth_of_fifty() {
    let s = schedule();
    let cond = full_bundle();
    let run = |steps| {
        let counter = CountingDenoiser::new(&Zero);
        sample(&counter, &s, &cond, &CfgScales::default(), steps, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        counter.calls()
    };
    assert_eq!(5 * run(10), run(50));
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let s = schedule();
    let cond = full_bundle();
    let go = |seed| sample(&Zero, &s, &cond, &CfgScales::default(), 20, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    assert_eq!(go(1), go(1));
    assert_ne!(go(1), go(2));
}
