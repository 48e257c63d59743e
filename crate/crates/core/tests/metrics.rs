use motiondiff::capp::PairEncoder;
use motiondiff::conditioning::{resolve_defaults, Gaze};
use motiondiff::diffusion::{CfgScales, CountingDenoiser, Denoise, DenoiseRequest, NoiseSchedule, ScheduleConfig};
use motiondiff::metrics::*;
use motiondiff::sequence::MotionSequence;
use motiondiff::windowing::generate_long;
use motiondiff::world::{SyntheticWorld, WorldConfig};
use motiondiff::{Error, Result, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_motion(frames: usize, dim: usize, rng: &mut impl Rng) -> MotionSequence {
    MotionSequence::from_vec(frames, dim, (0..frames * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// The definition, written out directly.
fn brute_delta_p(m: &MotionSequence) -> f64 {
    let mut total = 0.0;
    for f in 1..m.frames() {
        let (a, b) = (m.frame(f), m.frame(f - 1));
        total += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    }
    total / (m.frames() - 1) as f64 * 180.0 / std::f64::consts::PI
}

#[test]
fn delta_p_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let m = random_motion(100, 22, &mut rng);
        assert!((pose_variation_intensity(&m).unwrap() - brute_delta_p(&m)).abs() < 1e-9);
    }
}

#[test]
fn delta_p_closed_forms() {
    let flat = MotionSequence::from_vec(5, 6, vec![0.3; 30]).unwrap();
    assert_eq!(pose_variation_intensity(&flat).unwrap(), 0.0);
    let step = 0.3f64.to_radians();
    let mut data = Vec::new();
    for f in 0..50 {
        data.extend([f as f64 * step, 0.0, 0.0, 1.0, 2.0, 3.0]);
    }
    let m = MotionSequence::from_vec(50, 6, data).unwrap();
    assert!((pose_variation_intensity(&m).unwrap() - 0.3).abs() < 1e-12);
}

#[test]
fn delta_p_ignores_translations() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = random_motion(30, 6, &mut rng);
    let mut moved = m.clone();
    for f in 0..moved.frames() {
        for c in 3..6 {
            moved.frame_mut(f)[c] += rng.gen_range(-5.0..5.0);
        }
    }
    assert_eq!(pose_variation_intensity(&m).unwrap(), pose_variation_intensity(&moved).unwrap());
}

#[test]
fn delta_p_needs_two_frames() {
    let one = MotionSequence::from_vec(1, 6, vec![0.0; 6]).unwrap();
    assert!(matches!(pose_variation_intensity(&one), Err(Error::Contract(_))));
}

#[test]
fn pooled_delta_p_weights_frames_not_sequences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_motion(10, 6, &mut rng);
    let b = random_motion(91, 6, &mut rng);
    let pooled = pose_variation_pooled([&a, &b]).unwrap();
    let expect = (brute_delta_p(&a) * 9.0 + brute_delta_p(&b) * 90.0) / 99.0;
    assert!((pooled - expect).abs() < 1e-9);
}

proptest! {
    #[test]
    fn delta_p_offset_invariant(seed in any::<u64>(), off in prop::array::uniform3(-3.0f64..3.0)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_motion(20, 6, &mut rng);
        let mut shifted = m.clone();
        for f in 0..shifted.frames() {
            for c in 0..3 {
                shifted.frame_mut(f)[c] += off[c];
            }
        }
        let (a, b) = (pose_variation_intensity(&m).unwrap(), pose_variation_intensity(&shifted).unwrap());
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
    }

    #[test]
    fn delta_p_scales_linearly(seed in any::<u64>(), k in -4i32..5, s in 0.01f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_motion(20, 6, &mut rng);
        let scaled = |f: f64| {
            let mut out = m.clone();
            for i in 0..out.frames() {
                for c in 0..3 {
                    out.frame_mut(i)[c] *= f;
                }
            }
            pose_variation_intensity(&out).unwrap()
        };
        let base = pose_variation_intensity(&m).unwrap();
        // Powers of two scale every difference without rounding.
        let p = 2f64.powi(k);
        prop_assert_eq!(scaled(p), p * base);
        prop_assert!((scaled(s) - s * base).abs() <= 1e-12 * s * base);
    }
}

fn constant_pose(frames: usize, theta: f64, phi: f64, d: f64) -> MotionSequence {
    let mut data = Vec::new();
    for _ in 0..frames {
        data.extend([theta, phi, 0.0, 0.0, 0.0, d]);
        data.extend([0.0; 16]);
    }
    MotionSequence::from_vec(frames, 22, data).unwrap()
}

#[test]
fn adherence_of_exact_controls_is_zero() {
    let m = constant_pose(20, 0.2, -0.1, 1.1);
    let (g, d) = control_adherence(&m, Gaze::new(0.2, -0.1), 1.1).unwrap();
    assert!(g < 1e-6);
    assert_eq!(d, 0.0);
}

#[test]
fn adherence_sees_a_ten_degree_rotation() {
    let m = constant_pose(20, 0.0, 0.0, 1.0);
    let (g, d) = control_adherence(&m, Gaze::new(10f64.to_radians(), 0.0), 1.25).unwrap();
    assert!((g - 10.0).abs() < 1e-6, "{g}");
    assert!((d - 0.25).abs() < 1e-12);
}

#[test]
fn adherence_of_world_motion_is_at_noise_floor() {
    let world = SyntheticWorld::new(WorldConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = world.generate_sample(400, Gaze::new(0.2, 0.1), 1.1, &[0.0; 8], &mut rng).unwrap();
    let (g, d) = control_adherence(&s.motion, s.gaze, s.distance).unwrap();
    assert!(g < 5.0, "gaze error {g}");
    assert!(d < 0.1, "distance error {d}");
}

#[test]
fn report_csv_names_every_field() {
    let header = MetricReport::csv_header();
    for f in ["delta_p", "capp", "oracle_alignment", "gaze_error", "distance_error", "boundary_ratio"] {
        assert!(header.split(',').any(|h| h == f), "{f}");
    }
    let r = MetricReport {
        delta_p: 1.5,
        capp: None,
        oracle_alignment: 0.5,
        gaze_error: 2.0,
        distance_error: 0.1,
        boundary_ratio: Some(1.2),
    };
    assert_eq!(r.csv_row(), "1.5,,0.5,2,0.1,1.2");
}

/// Cheap stand-in model: pulls toward the requested pose plus audio
/// channel 0 on the lip channels, keeping a noise-dependent part so seeds
/// matter.
struct Fake;

impl Denoise for Fake {
    fn window(&self) -> usize {
        8
    }

    fn frame_dim(&self) -> usize {
        22
    }

    fn overlap(&self) -> usize {
        2
    }

    fn predict_x0(&self, batch: &[DenoiseRequest<'_>]) -> Result<Vec<Tensor>> {
        Ok(batch
            .iter()
            .map(|r| {
                let mut x = r.x_t.clone();
                x.data_mut().iter_mut().for_each(|v| *v *= 0.1);
                for f in 0..8 {
                    let row = x.row_mut(f);
                    if let Some(g) = r.cond.gaze {
                        row[0] += g.theta;
                        row[1] += g.phi;
                    }
                    if let Some(d) = r.cond.distance {
                        row[5] += d;
                    }
                    if let Some(a) = &r.cond.audio {
                        if f < a.present {
                            row[6] += a.features.frame(f)[0];
                        }
                    }
                }
                x
            })
            .collect())
    }
}

fn eval_items(world: &SyntheticWorld, n: usize, len: usize) -> Vec<EvalItem> {
    world
        .generate_dataset(n, len, 77)
        .unwrap()
        .into_iter()
        .map(|s| EvalItem {
            audio: s.audio,
            controls: resolve_defaults(Some(s.gaze), Some(s.distance), None, 1.0, 8).unwrap(),
        })
        .collect()
}

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(&ScheduleConfig {
        steps: 20,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn repeat_average_matches_manual_recomputation() {
    let world = SyntheticWorld::new(WorldConfig::default()).unwrap();
    let items = eval_items(&world, 3, 30);
    let sched = schedule();
    let ctx = EvalContext {
        denoiser: &Fake,
        schedule: &sched,
        world: &world,
        capp: None::<&dyn PairEncoder>,
        items: &items,
        repeats: 3,
        seed: 5,
    };
    let scales = CfgScales::default();
    let reported = evaluate_cell(&ctx, &scales, 5).unwrap();
    let mut manual = Vec::new();
    for r in 0..3 {
        let motions: Vec<MotionSequence> = items
            .iter()
            .enumerate()
            .map(|(i, it)| {
                let mut rng = generation_rng(5, r, i);
                generate_long(&Fake, &sched, &it.audio, &it.controls, &scales, 5, &mut rng).unwrap().motion
            })
            .collect();
        manual.push(score_generation(&world, None, &items, &motions, 8).unwrap());
    }
    assert_ne!(manual[0], manual[1], "seeds must differ between repeats");
    let n = 3.0;
    let mean = |f: fn(&MetricReport) -> f64| manual.iter().map(f).sum::<f64>() / n;
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + a.abs());
    assert!(close(reported.delta_p, mean(|r| r.delta_p)));
    assert!(close(reported.oracle_alignment, mean(|r| r.oracle_alignment)));
    assert!(close(reported.gaze_error, mean(|r| r.gaze_error)));
    assert!(close(reported.distance_error, mean(|r| r.distance_error)));
    assert!(close(reported.boundary_ratio.unwrap(), mean(|r| r.boundary_ratio.unwrap())));
    assert!(reported.delta_p >= 0.0 && reported.gaze_error >= 0.0 && reported.distance_error >= 0.0);
}

#[test]
fn sweep_cells_are_order_independent() {
    let world = SyntheticWorld::new(WorldConfig::default()).unwrap();
    let items = eval_items(&world, 2, 20);
    let sched = schedule();
    let ctx = EvalContext {
        denoiser: &Fake,
        schedule: &sched,
        world: &world,
        capp: None,
        items: &items,
        repeats: 2,
        seed: 9,
    };
    let cells = sweep_grid(&[0.0, 1.0], &[0.0, 2.0], &[4]);
    assert_eq!(cells.len(), 4);
    let forward = ablation_sweep(&ctx, &CfgScales::default(), &cells).unwrap();
    let reversed: Vec<SweepCell> = cells.iter().rev().copied().collect();
    let mut backward = ablation_sweep(&ctx, &CfgScales::default(), &reversed).unwrap();
    backward.reverse();
    let csv = sweep_csv(&forward);
    assert_eq!(csv, sweep_csv(&backward));
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("lambda_a,lambda_g,steps,"));
}

#[test]
fn zero_scales_at_full_steps_is_plain_conditional_sampling() {
    let world = SyntheticWorld::new(WorldConfig::default()).unwrap();
    let items = eval_items(&world, 1, 20);
    let sched = schedule();
    let counter = CountingDenoiser::new(&Fake);
    let ctx = EvalContext {
        denoiser: &counter,
        schedule: &sched,
        world: &world,
        capp: None,
        items: &items,
        repeats: 1,
        seed: 1,
    };
    let cells = sweep_grid(&[0.0], &[0.0], &[sched.len()]);
    ablation_sweep(&ctx, &CfgScales::default(), &cells).unwrap();
    // 20 frames in windows of 8 new frames: 3 windows, one call per step.
    assert_eq!(counter.calls(), 3 * sched.len());
}

#[test]
fn empty_eval_set_is_a_contract_error() {
    let world = SyntheticWorld::new(WorldConfig::default()).unwrap();
    let sched = schedule();
    let ctx = EvalContext {
        denoiser: &Fake,
        schedule: &sched,
        world: &world,
        capp: None,
        items: &[],
        repeats: 3,
        seed: 1,
    };
    assert!(matches!(evaluate_cell(&ctx, &CfgScales::default(), 5), Err(Error::Contract(_))));
}
