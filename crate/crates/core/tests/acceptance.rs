//! End-to-end acceptance checks. Each test prints one PASS/FAIL line and
//! then asserts. The desk-scale models are trained once and shared; a
//! global lock keeps the tests serial so their timings are honest.

use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use motiondiff::capp::{mismatched_score, scale_sensitivity, shift_sensitivity, train_capp, CappConfig, CappModel, PairSet};
use motiondiff::conditioning::{
    resolve_defaults, AudioCondition, Carry, ConditionBundle, DropoutPolicy, Gaze,
};
use motiondiff::denoiser::{Denoiser, DenoiserConfig};
use motiondiff::diffusion::{
    gaussian, loss_at, sample_batch, CfgScales, CountingDenoiser, NoiseSchedule, ScheduleConfig, TrainExample,
};
use motiondiff::gradcheck::{check_params, GradCheckReport};
use motiondiff::metrics::{evaluate_cell, pose_variation_intensity, EvalContext, EvalItem, MetricReport};
use motiondiff::sequence::{AudioFeatureSequence, MotionSequence};
use motiondiff::toy::{train_toy, wasserstein1, GaussianMixture, ToyConfig, ToyDenoiser};
use motiondiff::train::{DenoiserTrainer, TrainConfig};
use motiondiff::windowing::{boundary_ratio, generate_long, generate_long_batch, LongRequest};
use motiondiff::world::{SyntheticWorld, WorldConfig, WorldSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DENOISER_ITERATIONS: usize = 2000;
const CAPP_ITERATIONS: usize = 2000;
const EVAL_SEED: u64 = 11;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Writes straight to the process stderr so the line survives test capture.
fn report(n: usize, name: &str, pass: bool, detail: impl Display) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("acceptance {n:>2} {name}: {verdict} ({detail})\n");
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn world() -> SyntheticWorld {
    SyntheticWorld::new(WorldConfig::default()).unwrap()
}

struct Desk {
    world: SyntheticWorld,
    model: Denoiser,
    schedule: NoiseSchedule,
    mean_distance: f64,
    train_time: Duration,
    first_loss: f64,
    last_loss: f64,
}

/// The desk denoiser: default config on 500 x 200 = 100k world frames.
fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let world = world();
        let data = world.generate_dataset(500, 200, 1).unwrap();
        let config = TrainConfig {
            iterations: DENOISER_ITERATIONS,
            ..Default::default()
        };
        let start = Instant::now();
        let mut trainer =
            DenoiserTrainer::new(DenoiserConfig::default(), ScheduleConfig::default(), config, &data).unwrap();
        trainer.run(|_| Ok(())).unwrap();
        let train_time = start.elapsed();
        let log = trainer.log();
        let (first_loss, last_loss) = (log[0].loss, log[log.len() - 1].loss);
        let schedule = trainer.schedule().clone();
        let mean_distance = trainer.mean_distance();
        Desk {
            model: trainer.into_model(),
            world,
            schedule,
            mean_distance,
            train_time,
            first_loss,
            last_loss,
        }
    })
}

/// Held-out world sequences with their true controls.
fn eval_items(world: &SyntheticWorld, count: usize, length: usize, seed: u64, mean_distance: f64) -> Vec<EvalItem> {
    let dim = world.config().emotion_dim;
    world
        .generate_dataset(count, length, seed)
        .unwrap()
        .into_iter()
        .map(|s: WorldSample| EvalItem {
            controls: resolve_defaults(Some(s.gaze), Some(s.distance), Some(s.emotion), mean_distance, dim).unwrap(),
            audio: s.audio,
        })
        .collect()
}

fn context<'a>(d: &'a Desk, items: &'a [EvalItem]) -> EvalContext<'a, Denoiser> {
    EvalContext {
        denoiser: &d.model,
        schedule: &d.schedule,
        world: &d.world,
        capp: None,
        items,
        repeats: 3,
        seed: EVAL_SEED,
    }
}

fn scales(lambda_a: f64, lambda_g: f64) -> CfgScales {
    CfgScales {
        lambda_a,
        lambda_g,
        ..CfgScales::default()
    }
}

/// Default-scale, default-step metrics on the shared held-out set.
fn default_cell() -> &'static MetricReport {
    static CELL: OnceLock<MetricReport> = OnceLock::new();
    CELL.get_or_init(|| {
        let d = desk();
        let items = held_out();
        evaluate_cell(&context(d, items), &CfgScales::default(), 50).unwrap()
    })
}

fn held_out() -> &'static [EvalItem] {
    static ITEMS: OnceLock<Vec<EvalItem>> = OnceLock::new();
    ITEMS.get_or_init(|| {
        let d = desk();
        eval_items(&d.world, 8, 128, 1_000_003, d.mean_distance)
    })
}

fn tiny_denoiser_config() -> DenoiserConfig {
    DenoiserConfig {
        layers: 1,
        embed_dim: 8,
        heads: 2,
        window: 4,
        overlap: 2,
        pose_dim: 3,
        dyn_dim: 2,
        audio_dim: 3,
        emotion_dim: 2,
    }
}

fn denoiser_gradients() -> GradCheckReport {
    let cfg = tiny_denoiser_config();
    let model: &'static Denoiser = Box::leak(Box::new(Denoiser::new(cfg.clone(), 5).unwrap()));
    let schedule = NoiseSchedule::linear(&ScheduleConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let audio = AudioFeatureSequence::new(gaussian(&[cfg.window, cfg.audio_dim], &mut rng)).unwrap();
    let full = ConditionBundle {
        audio: Some(AudioCondition::full(audio.clone())),
        gaze: Some(Gaze::new(0.3, -0.2)),
        distance: Some(0.9),
        emotion: Some(vec![0.4, -0.1]),
        carry: Some(Carry {
            motion: MotionSequence::new(gaussian(&[cfg.overlap, cfg.motion_dim()], &mut rng)).unwrap(),
            audio: AudioFeatureSequence::new(gaussian(&[cfg.overlap, cfg.audio_dim], &mut rng)).unwrap(),
        }),
    };
    let mut partial = ConditionBundle::empty();
    let mut tail = AudioCondition::full(audio);
    tail.present = cfg.window - 1;
    partial.audio = Some(tail);
    let batch: Vec<TrainExample> = [full, partial]
        .into_iter()
        .map(|cond| TrainExample {
            x0: gaussian(&[cfg.window, cfg.motion_dim()], &mut rng),
            cond,
        })
        .collect();
    let draws: Vec<(usize, _)> = [40, 700]
        .into_iter()
        .map(|t| (t, gaussian(&[cfg.window, cfg.motion_dim()], &mut rng)))
        .collect();
    check_params(model.store(), |g| loss_at(model, g, &schedule, &batch, &draws), 1e-5, 1e-4, 1).unwrap()
}

fn capp_gradients() -> GradCheckReport {
    let cfg = CappConfig {
        layers: 1,
        embed_dim: 8,
        heads: 2,
        out_dim: 4,
        batch_size: 4,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let model = CappModel::new(cfg, 5, 3, 9).unwrap();
    let windows = |dim: usize, rng: &mut ChaCha8Rng| -> Vec<_> {
        (0..3)
            .map(|_| motiondiff::Tensor::from_fn([5, dim], |_| rng.gen_range(-1.0..1.0)))
            .collect()
    };
    let pose = windows(6, &mut rng);
    let audio = windows(3, &mut rng);
    check_params(model.store(), |g| model.loss(g, &pose, &audio), 1e-5, 1e-4, 1).unwrap()
}

#[test]
fn criterion_01_gradient_correctness() {
    let _s = serial();
    let start = Instant::now();
    let den = denoiser_gradients();
    let capp = capp_gradients();
    let secs = start.elapsed().as_secs_f64();
    let pass = den.passes(0.95, 1e-3) && capp.passes(0.95, 1e-3) && secs < 60.0;
    report(
        1,
        "gradient correctness",
        pass,
        format!(
            "denoiser {}/{} within 1e-4, max {:.1e}; capp {}/{} within 1e-4, max {:.1e}; {secs:.1} s",
            den.within_tight, den.checked, den.max_rel, capp.within_tight, capp.checked, capp.max_rel
        ),
    );
    assert!(pass, "{den:?}\n{capp:?}");
}

#[test]
fn criterion_02_toy_distribution_recovery() {
    let _s = serial();
    let target = GaussianMixture::two_modes();
    let schedule = NoiseSchedule::linear(&ScheduleConfig::default()).unwrap();
    let mut model = ToyDenoiser::new(ToyConfig::default(), &schedule, 3).unwrap();
    let start = Instant::now();
    train_toy(&mut model, &target, &schedule, 5000, 256, 2e-3, 4).unwrap();
    let train_secs = start.elapsed().as_secs_f64();

    let n = 10_000;
    let empty = ConditionBundle::empty();
    let conds: Vec<&ConditionBundle> = vec![&empty; n];
    let mut rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(77);
            r.set_stream(i as u64);
            r
        })
        .collect();
    let samples = sample_batch(&model, &schedule, &conds, &CfgScales::ZERO, schedule.len(), &mut rngs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let reference: Vec<Vec<f64>> = (0..n).map(|_| target.sample(&mut rng)).collect();
    let w1: Vec<f64> = (0..2)
        .map(|d| {
            let a: Vec<f64> = samples.iter().map(|x| x.data()[d]).collect();
            let b: Vec<f64> = reference.iter().map(|x| x[d]).collect();
            wasserstein1(&a, &b).unwrap()
        })
        .collect();
    let first = samples.iter().filter(|x| target.nearest_mode(x.data()) == 0).count() as f64 / n as f64;
    let pass = w1.iter().all(|&w| w < 0.05) && first >= 0.3 && first <= 0.7 && train_secs <= 300.0;
    report(
        2,
        "toy distribution recovery",
        pass,
        format!(
            "W1 {:.4} / {:.4}, mode masses {first:.3} / {:.3}, trained in {train_secs:.0} s",
            w1[0],
            w1[1],
            1.0 - first
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_03_conditional_fidelity() {
    let _s = serial();
    let d = desk();
    let cell = default_cell();
    let minutes = d.train_time.as_secs_f64() / 60.0;
    let pass = cell.oracle_alignment > 0.8 && minutes <= 30.0 && d.last_loss < d.first_loss;
    report(
        3,
        "conditional fidelity",
        pass,
        format!(
            "oracle alignment {:.3}, {DENOISER_ITERATIONS} iterations in {minutes:.1} min, loss {:.4} -> {:.4}",
            cell.oracle_alignment, d.first_loss, d.last_loss
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_04_guidance_trends() {
    let _s = serial();
    let d = desk();
    let items = held_out();
    let ctx = context(d, items);
    let align: Vec<f64> = [0.0, 0.5, 1.0]
        .iter()
        .map(|&a| {
            if a == 0.5 {
                default_cell().oracle_alignment
            } else {
                evaluate_cell(&ctx, &scales(a, 1.0), 50).unwrap().oracle_alignment
            }
        })
        .collect();
    let gaze: Vec<f64> = [0.0, 2.0]
        .iter()
        .map(|&g| evaluate_cell(&ctx, &scales(0.5, g), 50).unwrap().gaze_error)
        .collect();
    let pass = align[0] <= align[1] && align[1] <= align[2] && gaze[1] <= gaze[0];
    report(
        4,
        "guidance trends",
        pass,
        format!(
            "alignment over lambda_a 0/0.5/1: {:.4} {:.4} {:.4}; gaze error lambda_g 0 -> 2: {:.2} -> {:.2} deg",
            align[0], align[1], align[2], gaze[0], gaze[1]
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_05_step_reduction() {
    let _s = serial();
    let d = desk();
    let items = held_out();
    let audio = &items[0].audio;
    let calls = |steps: usize| {
        let counter = CountingDenoiser::new(&d.model);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        generate_long(&counter, &d.schedule, audio, &items[0].controls, &CfgScales::default(), steps, &mut rng).unwrap();
        counter.calls()
    };
    let (c50, c10) = (calls(50), calls(10));
    let fast = evaluate_cell(&context(d, items), &CfgScales::default(), 10).unwrap().oracle_alignment;
    let slow = default_cell().oracle_alignment;
    let pass = 5 * c10 == c50 && (fast - slow).abs() <= 0.1;
    report(
        5,
        "step reduction",
        pass,
        format!("calls {c10} vs {c50}; alignment {fast:.4} at 10 steps vs {slow:.4} at 50"),
    );
    assert!(pass);
}

#[test]
fn criterion_06_window_seamlessness() {
    let _s = serial();
    let d = desk();
    let w = d.model.config().window;
    let k = d.model.config().overlap;
    let items = eval_items(&d.world, 100, 5 * w, 2_000_003, d.mean_distance);
    let requests: Vec<LongRequest> = items
        .iter()
        .map(|i| LongRequest {
            audio: &i.audio,
            controls: &i.controls,
        })
        .collect();
    let mut rngs: Vec<ChaCha8Rng> = (0..items.len() as u64).map(ChaCha8Rng::seed_from_u64).collect();
    let outs = generate_long_batch(&d.model, &d.schedule, &requests, &CfgScales::default(), 50, &mut rngs).unwrap();
    let ratio = boundary_ratio(outs.iter().map(|o| &o.motion), w).unwrap();

    let long = &items[0];
    let lengths = [1, k, w - 1, w, w + 1, 2 * w, 5 * w + 3];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let audio = AudioFeatureSequence::concat(&[&long.audio, &long.audio]).unwrap();
    let mut bad = Vec::new();
    for n in lengths {
        let a = audio.slice(0, n).unwrap();
        let out = generate_long(&d.model, &d.schedule, &a, &long.controls, &CfgScales::default(), 2, &mut rng).unwrap();
        if out.motion.frames() != n || out.motion.dim() != d.model.config().motion_dim() {
            bad.push(n);
        }
    }
    let pass = ratio <= 2.0 && bad.is_empty();
    report(
        6,
        "window seamlessness",
        pass,
        format!("boundary ratio {ratio:.3} over 100 x {} frames; length contract failures {bad:?}", 5 * w),
    );
    assert!(pass);
}

#[test]
fn criterion_07_capp_sensitivity() {
    let _s = serial();
    let world = world();
    let data = world.generate_dataset(500, 200, 1).unwrap();
    let held = world.generate_dataset(60, 400, 999).unwrap();
    let config = CappConfig {
        iterations: CAPP_ITERATIONS,
        ..Default::default()
    };
    let window = config.window(world.config().frame_rate);
    let model = train_capp(config, window, &PairSet::from_samples(&data).unwrap(), |_| Ok(())).unwrap();
    let set = PairSet::from_samples(&held).unwrap();
    let shifts: Vec<f64> = shift_sensitivity(&model, &set, &[0, 1, 2, 3, 4])
        .unwrap()
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    let mismatched = mismatched_score(&model, &set).unwrap();
    let scaled: Vec<f64> = scale_sensitivity(&model, &set, &[0.2, 1.0, 3.0])
        .unwrap()
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    let decreasing = shifts[0] > shifts[1] && shifts[1] > shifts[2];
    let far = shifts[3] < 0.15 && shifts[4] < 0.15;
    let gap = shifts[0] - mismatched;
    let peak = scaled[1] >= scaled[0] && scaled[1] >= scaled[2];
    let pass = decreasing && far && gap > 0.3 && peak;
    report(
        7,
        "capp sensitivity",
        pass,
        format!(
            "shifts 0..4 {:.3} {:.3} {:.3} {:.3} {:.3}; gap {gap:.3}; factor 0.2/1/3 {:.3} {:.3} {:.3}",
            shifts[0], shifts[1], shifts[2], shifts[3], shifts[4], scaled[0], scaled[1], scaled[2]
        ),
    );
    assert!(pass);
}

fn brute_delta_p(m: &MotionSequence) -> f64 {
    let mut total = 0.0;
    for f in 1..m.frames() {
        let (a, b) = (m.frame(f), m.frame(f - 1));
        total += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    }
    total / (m.frames() - 1) as f64 * 180.0 / std::f64::consts::PI
}

#[test]
fn criterion_08_delta_p_exactness() {
    let _s = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    let mut scaling = true;
    for _ in 0..200 {
        let frames = rng.gen_range(2..300);
        let m = MotionSequence::from_vec(frames, 22, (0..frames * 22).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let dp = pose_variation_intensity(&m).unwrap();
        worst = worst.max((dp - brute_delta_p(&m)).abs());
        for c in [0.25, 2.0, 8.0] {
            let scaled = MotionSequence::from_vec(frames, 22, m.tensor().data().iter().map(|v| v * c).collect()).unwrap();
            scaling &= pose_variation_intensity(&scaled).unwrap() == c * dp;
        }
    }
    let pass = worst <= 1e-9 && scaling;
    report(
        8,
        "delta-p exactness",
        pass,
        format!("max brute-force deviation {worst:.1e}; exact linear scaling {scaling}"),
    );
    assert!(pass);
}

#[test]
fn criterion_09_dropout_rates() {
    let _s = serial();
    let w = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let full = ConditionBundle {
        audio: Some(AudioCondition::full(AudioFeatureSequence::new(gaussian(&[w, 4], &mut rng)).unwrap())),
        gaze: Some(Gaze::new(0.1, 0.2)),
        distance: Some(1.0),
        emotion: Some(vec![0.0; 3]),
        carry: Some(Carry {
            motion: MotionSequence::new(gaussian(&[4, 5], &mut rng)).unwrap(),
            audio: AudioFeatureSequence::new(gaussian(&[4, 4], &mut rng)).unwrap(),
        }),
    };
    let policy = DropoutPolicy::default();
    let n = 100_000;
    let mut dropped = [0usize; 5];
    for _ in 0..n {
        let b = policy.apply(&full, &mut rng);
        let gone = [b.audio.is_none(), b.gaze.is_none(), b.distance.is_none(), b.emotion.is_none(), b.carry.is_none()];
        for (c, g) in dropped.iter_mut().zip(gone) {
            *c += g as usize;
        }
    }
    let rates: Vec<f64> = dropped.iter().map(|&c| c as f64 / n as f64).collect();
    let nominal = [0.1, 0.1, 0.1, 0.1, 0.5];
    let pass = rates.iter().zip(nominal).all(|(r, p)| (r - p).abs() <= 0.005);
    report(
        9,
        "dropout rates",
        pass,
        format!(
            "audio {:.4}, gaze {:.4}, distance {:.4}, emotion {:.4}, carry {:.4}",
            rates[0], rates[1], rates[2], rates[3], rates[4]
        ),
    );
    assert!(pass);
}

const TINY: &str = r#"
[dataset]
count = 6
length = 40
shard_size = 4

[denoiser]
layers = 1
embed_dim = 16
heads = 2
window = 8
overlap = 2

[train]
batch_size = 4
iterations = 30
warmup = 5
log_every = 5
"#;

fn pipeline(dir: &Path) {
    fs::write(dir.join("run.toml"), TINY).unwrap();
    let run = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_motiondiff"))
            .arg("--config")
            .arg(dir.join("run.toml"))
            .args(args)
            .current_dir(dir)
            .env("MOTIONDIFF_DATA", dir)
            .output()
            .unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    run(&["world", "generate", "--seed", "7"]);
    run(&["train", "denoiser", "--seed", "3"]);
    run(&["generate", "--world-seed", "5", "--length", "30", "--steps", "8", "--seed", "2", "--out", "gen"]);
}

#[test]
fn criterion_10_reproducibility() {
    let _s = serial();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    let mut files: Vec<String> = fs::read_dir(a.path().join("dataset"))
        .unwrap()
        .map(|e| format!("dataset/{}", e.unwrap().file_name().to_string_lossy()))
        .collect();
    files.sort();
    files.extend(["denoiser.ckpt.loss.csv", "denoiser.ckpt", "gen.csv", "gen.bin"].map(String::from));
    let differing: Vec<&String> = files
        .iter()
        .filter(|f| fs::read(a.path().join(f)).unwrap() != fs::read(b.path().join(f)).unwrap())
        .collect();
    let pass = differing.is_empty();
    report(
        10,
        "reproducibility",
        pass,
        format!("{} artifacts compared, differing {differing:?}", files.len()),
    );
    assert!(pass);
}
