//! Motion metrics and the guidance/steps evaluation driver.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::capp::{capp_score, pose_channels, PairEncoder};
use crate::conditioning::{Gaze, ResolvedControls};
use crate::diffusion::{CfgScales, Denoise, NoiseSchedule};
use crate::error::{Error, Result};
use crate::sequence::{AudioFeatureSequence, MotionSequence};
use crate::tensor::Tensor;
use crate::windowing::{generate_long_batch, LongRequest, SeamStats};
use crate::world::SyntheticWorld;

/// Rotation angles (radians) occupy the first three motion channels.
pub const ROTATION_DIMS: usize = 3;
/// Head distance is the last pose channel.
pub const DISTANCE_CHANNEL: usize = 5;

fn rotation_step(motion: &MotionSequence, f: usize) -> f64 {
    let (a, b) = (motion.frame(f), motion.frame(f - 1));
    (0..ROTATION_DIMS).map(|j| (a[j] - b[j]) * (a[j] - b[j])).sum::<f64>().sqrt()
}

/// Mean over adjacent frame pairs of the Euclidean norm of the rotation
/// change, in degrees. Translations are excluded.
pub fn pose_variation_intensity(motion: &MotionSequence) -> Result<f64> {
    pose_variation_pooled([motion])
}

/// [`pose_variation_intensity`] pooled per frame pair over several sequences.
pub fn pose_variation_pooled<'a>(motions: impl IntoIterator<Item = &'a MotionSequence>) -> Result<f64> {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for m in motions {
        if m.frames() < 2 || m.dim() < ROTATION_DIMS {
            return Err(Error::contract(format!(
                "pose variation needs at least 2 frames with {ROTATION_DIMS} rotation channels, got {}x{}",
                m.frames(),
                m.dim()
            )));
        }
        sum += (1..m.frames()).map(|f| rotation_step(m, f)).sum::<f64>();
        pairs += m.frames() - 1;
    }
    if pairs == 0 {
        return Err(Error::contract("pose variation of an empty set"));
    }
    Ok((sum / pairs as f64).to_degrees())
}

/// Angle between the requested gaze and the mean generated rotation
/// direction (degrees), and the absolute error of the mean distance channel.
pub fn control_adherence(generated: &MotionSequence, gaze: Gaze, distance: f64) -> Result<(f64, f64)> {
    if generated.dim() <= DISTANCE_CHANNEL {
        return Err(Error::Shape {
            op: "control_adherence",
            lhs: vec![DISTANCE_CHANNEL + 1],
            rhs: vec![generated.dim()],
        });
    }
    let n = generated.frames() as f64;
    let mean = |c: usize| generated.channel(c).iter().sum::<f64>() / n;
    let seen = Gaze::new(mean(0), mean(1));
    Ok((gaze.angle_to(&seen), (distance - mean(DISTANCE_CHANNEL)).abs()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricReport {
    /// Degrees per frame.
    pub delta_p: f64,
    /// `None` without a CAPP model or with sequences shorter than its window.
    pub capp: Option<f64>,
    pub oracle_alignment: f64,
    /// Degrees.
    pub gaze_error: f64,
    pub distance_error: f64,
    /// `None` when no sequence spans a window seam.
    pub boundary_ratio: Option<f64>,
}

pub const REPORT_FIELDS: [&str; 6] = [
    "delta_p",
    "capp",
    "oracle_alignment",
    "gaze_error",
    "distance_error",
    "boundary_ratio",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricReport {
    pub fn csv_header() -> String {
        REPORT_FIELDS.join(",")
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.delta_p,
            opt(self.capp),
            self.oracle_alignment,
            self.gaze_error,
            self.distance_error,
            opt(self.boundary_ratio)
        )
    }

    /// Field-wise mean. Optional fields are averaged over the reports that
    /// have them.
    pub fn mean(reports: &[MetricReport]) -> Result<MetricReport> {
        if reports.is_empty() {
            return Err(Error::contract("mean of no reports"));
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let avg_opt = |f: fn(&MetricReport) -> Option<f64>| {
            let v: Vec<f64> = reports.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Ok(MetricReport {
            delta_p: avg(|r| r.delta_p),
            capp: avg_opt(|r| r.capp),
            oracle_alignment: avg(|r| r.oracle_alignment),
            gaze_error: avg(|r| r.gaze_error),
            distance_error: avg(|r| r.distance_error),
            boundary_ratio: avg_opt(|r| r.boundary_ratio),
        })
    }
}

/// One evaluation sequence: audio plus the controls requested for it.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub audio: AudioFeatureSequence,
    pub controls: ResolvedControls,
}

/// Everything a cell evaluation needs besides the cell itself.
pub struct EvalContext<'a, D: Denoise + ?Sized> {
    pub denoiser: &'a D,
    pub schedule: &'a NoiseSchedule,
    pub world: &'a SyntheticWorld,
    pub capp: Option<&'a dyn PairEncoder>,
    pub items: &'a [EvalItem],
    /// Generations per item, each with its own seed.
    pub repeats: usize,
    pub seed: u64,
}

/// Metrics of one generated set against its eval items.
pub fn score_generation(
    world: &SyntheticWorld,
    capp: Option<&dyn PairEncoder>,
    items: &[EvalItem],
    motions: &[MotionSequence],
    window: usize,
) -> Result<MetricReport> {
    if items.is_empty() || items.len() != motions.len() {
        return Err(Error::contract("one generated sequence per eval item"));
    }
    let n = items.len() as f64;
    let mut align = 0.0;
    let mut gaze = 0.0;
    let mut dist = 0.0;
    let mut seams = SeamStats::default();
    for (item, m) in items.iter().zip(motions) {
        align += world.oracle_alignment(m, &item.audio)?;
        let (g, d) = control_adherence(m, item.controls.gaze, item.controls.distance)?;
        gaze += g;
        dist += d;
        seams.add(m, window);
    }
    let capp = match capp {
        Some(enc) => capp_windows(enc, items, motions)?,
        None => None,
    };
    Ok(MetricReport {
        delta_p: pose_variation_pooled(motions)?,
        capp,
        oracle_alignment: align / n,
        gaze_error: gaze / n,
        distance_error: dist / n,
        boundary_ratio: seams.ratio().ok(),
    })
}

/// CAPP over non-overlapping windows of every long-enough sequence.
fn capp_windows(enc: &dyn PairEncoder, items: &[EvalItem], motions: &[MotionSequence]) -> Result<Option<f64>> {
    let w = enc.window();
    let mut audio = Vec::new();
    let mut pose = Vec::new();
    for (item, m) in items.iter().zip(motions) {
        let p = pose_channels(m.tensor())?;
        let mut s = 0;
        while s + w <= m.frames() {
            audio.push(item.audio.tensor().slice_rows(s, w)?);
            pose.push(p.slice_rows(s, w)?);
            s += w;
        }
    }
    if audio.is_empty() {
        return Ok(None);
    }
    capp_score(enc, &audio, &pose).map(Some)
}

/// Seeded rng for item `item` of repeat `repeat`.
pub fn generation_rng(seed: u64, repeat: usize, item: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(repeat as u64));
    rng.set_stream(item as u64);
    rng
}

/// Generates every item once per repeat and scores each repeat.
pub fn evaluate_repeats<D: Denoise + ?Sized>(
    ctx: &EvalContext<'_, D>,
    scales: &CfgScales,
    steps: usize,
) -> Result<Vec<(Vec<MotionSequence>, MetricReport)>> {
    if ctx.items.is_empty() {
        return Err(Error::contract("empty evaluation set"));
    }
    if ctx.repeats == 0 {
        return Err(Error::contract("at least one repeat"));
    }
    let requests: Vec<LongRequest> = ctx
        .items
        .iter()
        .map(|i| LongRequest {
            audio: &i.audio,
            controls: &i.controls,
        })
        .collect();
    (0..ctx.repeats)
        .map(|r| {
            let mut rngs: Vec<ChaCha8Rng> = (0..ctx.items.len()).map(|i| generation_rng(ctx.seed, r, i)).collect();
            let outs = generate_long_batch(ctx.denoiser, ctx.schedule, &requests, scales, steps, &mut rngs)?;
            let motions: Vec<MotionSequence> = outs.into_iter().map(|o| o.motion).collect();
            let report = score_generation(ctx.world, ctx.capp, ctx.items, &motions, ctx.denoiser.window())?;
            Ok((motions, report))
        })
        .collect()
}

/// Mean report over `repeats` seeded generations of the eval set.
pub fn evaluate_cell<D: Denoise + ?Sized>(ctx: &EvalContext<'_, D>, scales: &CfgScales, steps: usize) -> Result<MetricReport> {
    let reports: Vec<MetricReport> = evaluate_repeats(ctx, scales, steps)?.into_iter().map(|(_, r)| r).collect();
    MetricReport::mean(&reports)
}

/// One point of an ablation grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepCell {
    pub lambda_a: f64,
    pub lambda_g: f64,
    pub steps: usize,
}

/// Cartesian product in `lambda_a`-major order.
pub fn sweep_grid(lambda_a: &[f64], lambda_g: &[f64], steps: &[usize]) -> Vec<SweepCell> {
    let mut out = Vec::new();
    for &a in lambda_a {
        for &g in lambda_g {
            for &s in steps {
                out.push(SweepCell {
                    lambda_a: a,
                    lambda_g: g,
                    steps: s,
                });
            }
        }
    }
    out
}

/// Evaluates every cell with the same seeds, so cells are independent of
/// order. Scales other than `lambda_a` and `lambda_g` come from `base`.
pub fn ablation_sweep<D: Denoise + ?Sized>(
    ctx: &EvalContext<'_, D>,
    base: &CfgScales,
    cells: &[SweepCell],
) -> Result<Vec<(SweepCell, MetricReport)>> {
    cells
        .iter()
        .map(|&c| {
            let scales = CfgScales {
                lambda_a: c.lambda_a,
                lambda_g: c.lambda_g,
                ..*base
            };
            Ok((c, evaluate_cell(ctx, &scales, c.steps)?))
        })
        .collect()
}

pub fn sweep_csv(rows: &[(SweepCell, MetricReport)]) -> String {
    let mut out = format!("lambda_a,lambda_g,steps,{}\n", MetricReport::csv_header());
    for (c, r) in rows {
        let _ = writeln!(out, "{},{},{},{}", c.lambda_a, c.lambda_g, c.steps, r.csv_row());
    }
    out
}

/// Rotation channels of a motion tensor, for callers building CAPP input.
pub fn rotations(motion: &MotionSequence) -> Tensor {
    let mut t = Tensor::zeros([motion.frames(), ROTATION_DIMS]);
    for f in 0..motion.frames() {
        t.row_mut(f).copy_from_slice(&motion.frame(f)[..ROTATION_DIMS]);
    }
    t
}
