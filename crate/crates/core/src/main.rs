use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use motiondiff::archive::Archive;
use motiondiff::capp::{train_capp, CappModel, PairEncoder, PairSet};
use motiondiff::conditioning::{resolve_defaults, Gaze};
use motiondiff::config::{RunConfig, DATA_ROOT_ENV};
use motiondiff::dataset::{read_dataset, write_dataset};
use motiondiff::diffusion::{CountingDenoiser, NoiseSchedule};
use motiondiff::metrics::{ablation_sweep, sweep_csv, sweep_grid, EvalContext, EvalItem};
use motiondiff::sequence::AudioFeatureSequence;
use motiondiff::train::{load_denoiser, DenoiserTrainer, LossRecord, LOSS_CSV_HEADER};
use motiondiff::windowing::generate_long;
use motiondiff::world::SyntheticWorld;
use motiondiff::{Error, Result};

#[derive(Parser)]
#[command(name = "motiondiff", version, about = "Conditional motion diffusion on a synthetic talking-head world")]
struct Cli {
    /// TOML run config; missing sections take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root for relative artifact paths.
    #[arg(long, global = true, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic world data.
    World {
        #[command(subcommand)]
        command: WorldCommand,
    },
    /// Model training.
    Train {
        #[command(subcommand)]
        command: TrainCommand,
    },
    /// Generates motion for one audio sequence.
    Generate(GenerateArgs),
    /// Scores generations on held-out world sequences.
    Evaluate(EvaluateArgs),
}

#[derive(Subcommand)]
enum WorldCommand {
    /// Writes dataset shards and a manifest.
    Generate {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        length: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum TrainCommand {
    /// Trains the diffusion denoiser.
    Denoiser {
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset directory.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Checkpoint path; the loss log goes to `<out>.loss.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trains the CAPP audio/pose encoders.
    Capp {
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Audio archive holding an `audio` tensor `[frames, audio_dim]`.
    #[arg(long, conflicts_with = "world_seed")]
    audio: Option<PathBuf>,
    /// Take the audio of a fresh world sample with this seed instead.
    #[arg(long)]
    world_seed: Option<u64>,
    /// Frames of world audio.
    #[arg(long, default_value_t = 160)]
    length: usize,
    /// Gaze as `theta,phi` in radians.
    #[arg(long, value_parser = parse_gaze, allow_hyphen_values = true)]
    gaze: Option<Gaze>,
    #[arg(long)]
    distance: Option<f64>,
    /// Comma-separated emotion offset.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    emotion: Option<Vec<f64>>,
    #[arg(long)]
    lambda_a: Option<f64>,
    #[arg(long)]
    lambda_g: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output prefix; writes `<out>.bin` and `<out>.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// CAPP checkpoint; without one the capp column stays empty.
    #[arg(long)]
    capp: Option<PathBuf>,
    /// Held-out sequences.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda_a: Option<f64>,
    #[arg(long)]
    lambda_g: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Sweep values; each defaults to the single configured value.
    #[arg(long, value_delimiter = ',')]
    sweep_lambda_a: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    sweep_lambda_g: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    sweep_steps: Option<Vec<usize>>,
    /// CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_list<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, String> {
    s.split(',')
        .map(|v| v.trim().parse::<T>().map_err(|_| format!("bad list entry {v:?}")))
        .collect()
}

fn parse_gaze(s: &str) -> std::result::Result<Gaze, String> {
    match parse_list::<f64>(s)?.as_slice() {
        &[theta, phi] => Ok(Gaze::new(theta, phi)),
        _ => Err("gaze takes two comma-separated angles: theta,phi".into()),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(root) = &cli.data_root {
        if cfg.paths.data_root.is_empty() {
            cfg.paths.data_root = root.to_string_lossy().into_owned();
        }
    }
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Appends loss records to a CSV log, writing the header for a new file.
struct LossLog {
    path: PathBuf,
    file: fs::File,
}

impl LossLog {
    fn open(path: PathBuf, fresh: bool) -> Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut opts = OpenOptions::new();
        if fresh {
            opts.write(true).create(true).truncate(true);
        } else {
            opts.append(true).create(true);
        }
        let mut file = opts.open(&path).map_err(|e| Error::io(&path, e))?;
        let empty = file.metadata().map_err(|e| Error::io(&path, e))?.len() == 0;
        if empty {
            writeln!(file, "{LOSS_CSV_HEADER}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(Self { path, file })
    }

    fn record(&mut self, r: &LossRecord) -> Result<()> {
        writeln!(self.file, "{}", r.csv_line()).map_err(|e| Error::io(&self.path, e))
    }
}

fn world_generate(
    mut cfg: RunConfig,
    count: Option<usize>,
    length: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    cfg.dataset.count = count.unwrap_or(cfg.dataset.count);
    cfg.dataset.length = length.unwrap_or(cfg.dataset.length);
    cfg.dataset.seed = seed.unwrap_or(cfg.dataset.seed);
    cfg.validate()?;
    let dir = out.unwrap_or_else(|| cfg.paths.dataset());
    let m = write_dataset(&dir, &cfg)?;
    println!(
        "wrote {} sequences ({} frames) in {} shards to {}",
        m.count,
        m.total_frames,
        m.shards.len(),
        dir.display()
    );
    Ok(())
}

fn train_denoiser(
    mut cfg: RunConfig,
    iterations: Option<usize>,
    seed: Option<u64>,
    dataset: Option<PathBuf>,
    resume: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    cfg.train.iterations = iterations.unwrap_or(cfg.train.iterations);
    cfg.train.seed = seed.unwrap_or(cfg.train.seed);
    cfg.validate()?;
    let dir = dataset.unwrap_or_else(|| cfg.paths.dataset());
    let (manifest, data) = read_dataset(&dir)?;
    info!("training on {} sequences, {} frames", manifest.count, manifest.total_frames);
    let out = out.unwrap_or_else(|| cfg.paths.denoiser());
    let mut trainer = match &resume {
        Some(p) => {
            let archive = Archive::load(p)?;
            load_denoiser(&archive)?.check_config(&cfg.denoiser)?;
            let t = DenoiserTrainer::resume(&archive, cfg.train.clone(), &data)?;
            info!("resuming at iteration {}", t.iteration());
            t
        }
        None => DenoiserTrainer::new(cfg.denoiser.clone(), cfg.schedule, cfg.train.clone(), &data)?,
    };
    trainer.set_dropout(cfg.dropout);
    let mut log = LossLog::open(with_suffix(&out, ".loss.csv"), resume.is_none())?;
    trainer.run(|r| {
        info!("iteration {} loss {:.5}", r.iteration, r.loss);
        log.record(r)
    })?;
    trainer.checkpoint()?.save(&out)?;
    println!("wrote {} at iteration {}", out.display(), trainer.iteration());
    Ok(())
}

fn train_capp_cmd(
    mut cfg: RunConfig,
    iterations: Option<usize>,
    seed: Option<u64>,
    dataset: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    cfg.capp.iterations = iterations.unwrap_or(cfg.capp.iterations);
    cfg.capp.seed = seed.unwrap_or(cfg.capp.seed);
    cfg.validate()?;
    let dir = dataset.unwrap_or_else(|| cfg.paths.dataset());
    let (_, data) = read_dataset(&dir)?;
    let set = PairSet::from_samples(&data)?;
    let out = out.unwrap_or_else(|| cfg.paths.capp());
    let mut log = LossLog::open(with_suffix(&out, ".loss.csv"), true)?;
    let window = cfg.capp.window(cfg.world.frame_rate);
    let model = train_capp(cfg.capp.clone(), window, &set, |r| {
        info!("iteration {} loss {:.5}", r.iteration, r.loss);
        log.record(r)
    })?;
    model.save()?.save(&out)?;
    println!("wrote {} (window {window} frames, temperature {:.4})", out.display(), model.temperature());
    Ok(())
}

fn generate(mut cfg: RunConfig, a: GenerateArgs) -> Result<()> {
    cfg.generation.lambda_a = a.lambda_a.unwrap_or(cfg.generation.lambda_a);
    cfg.generation.lambda_g = a.lambda_g.unwrap_or(cfg.generation.lambda_g);
    cfg.generation.steps = a.steps.unwrap_or(cfg.generation.steps);
    cfg.generation.seed = a.seed.unwrap_or(cfg.generation.seed);
    cfg.validate()?;
    let ckpt = a.checkpoint.unwrap_or_else(|| cfg.paths.denoiser());
    let loaded = load_denoiser(&Archive::load(&ckpt)?)?;
    loaded.check_config(&cfg.denoiser)?;
    let schedule = NoiseSchedule::linear(&loaded.schedule)?;
    let audio = match &a.audio {
        Some(p) => AudioFeatureSequence::new(Archive::load(p)?.require("audio")?.clone())?,
        None => {
            let world = SyntheticWorld::new(cfg.world.clone())?;
            let mut rng = ChaCha8Rng::seed_from_u64(a.world_seed.unwrap_or(0));
            world.random_sample(a.length, &mut rng)?.audio
        }
    };
    if audio.dim() != cfg.denoiser.audio_dim {
        return Err(Error::Incompatible(format!(
            "audio has {} features, the model expects {}",
            audio.dim(),
            cfg.denoiser.audio_dim
        )));
    }
    let controls = resolve_defaults(a.gaze, a.distance, a.emotion, loaded.mean_distance, cfg.denoiser.emotion_dim)?;
    let scales = cfg.generation.scales();
    let steps = cfg.generation.steps;
    info!(
        "generating {} frames: lambda_a {} lambda_g {} steps {}",
        audio.frames(),
        scales.lambda_a,
        scales.lambda_g,
        steps
    );
    let counter = CountingDenoiser::new(&loaded.model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.generation.seed);
    let out = generate_long(&counter, &schedule, &audio, &controls, &scales, steps, &mut rng)?;
    info!("denoiser calls: {}", counter.calls());
    let prefix = a.out.unwrap_or_else(|| cfg.paths.reports().join("motion"));
    let mut archive = Archive::new();
    archive.set_meta("kind", "motion");
    archive.set_meta("steps", steps);
    archive.set_meta("denoiser_calls", counter.calls());
    archive.push("motion", out.motion.tensor().clone());
    archive.save(with_suffix(&prefix, ".bin"))?;
    write_text(&with_suffix(&prefix, ".csv"), &out.motion.to_csv("m"))?;
    println!(
        "wrote {} frames to {}.{{bin,csv}}; denoiser calls: {}",
        out.motion.frames(),
        prefix.display(),
        counter.calls()
    );
    Ok(())
}

fn evaluate(mut cfg: RunConfig, a: EvaluateArgs) -> Result<()> {
    cfg.eval.count = a.count.unwrap_or(cfg.eval.count);
    cfg.eval.length = a.length.unwrap_or(cfg.eval.length);
    cfg.eval.repeats = a.repeats.unwrap_or(cfg.eval.repeats);
    cfg.eval.seed = a.seed.unwrap_or(cfg.eval.seed);
    cfg.generation.lambda_a = a.lambda_a.unwrap_or(cfg.generation.lambda_a);
    cfg.generation.lambda_g = a.lambda_g.unwrap_or(cfg.generation.lambda_g);
    cfg.generation.steps = a.steps.unwrap_or(cfg.generation.steps);
    cfg.validate()?;
    if cfg.eval.count == 0 {
        return Err(Error::contract("empty evaluation set"));
    }
    let loaded = load_denoiser(&Archive::load(a.checkpoint.unwrap_or_else(|| cfg.paths.denoiser()))?)?;
    loaded.check_config(&cfg.denoiser)?;
    let schedule = NoiseSchedule::linear(&loaded.schedule)?;
    let capp_path = a.capp.clone().unwrap_or_else(|| cfg.paths.capp());
    let capp = if a.capp.is_some() || capp_path.exists() {
        Some(CappModel::load(&Archive::load(&capp_path)?)?)
    } else {
        warn!("no CAPP checkpoint at {}; capp column left empty", capp_path.display());
        None
    };
    let world = SyntheticWorld::new(cfg.world.clone())?;
    let held = world.generate_dataset(cfg.eval.count, cfg.eval.length, cfg.eval.data_seed)?;
    let items = held
        .iter()
        .map(|s| {
            Ok(EvalItem {
                audio: s.audio.clone(),
                controls: resolve_defaults(
                    Some(s.gaze),
                    Some(s.distance),
                    Some(s.emotion.clone()),
                    loaded.mean_distance,
                    cfg.denoiser.emotion_dim,
                )?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let g = &cfg.generation;
    let cells = sweep_grid(
        a.sweep_lambda_a.as_deref().unwrap_or(&[g.lambda_a]),
        a.sweep_lambda_g.as_deref().unwrap_or(&[g.lambda_g]),
        a.sweep_steps.as_deref().unwrap_or(&[g.steps]),
    );
    if let Some(bad) = cells.iter().find(|c| c.steps == 0 || c.steps > loaded.schedule.steps) {
        return Err(Error::validation(format!("sweep steps {} outside [1, T]", bad.steps)));
    }
    let ctx = EvalContext {
        denoiser: &loaded.model,
        schedule: &schedule,
        world: &world,
        capp: capp.as_ref().map(|m| m as &dyn PairEncoder),
        items: &items,
        repeats: cfg.eval.repeats,
        seed: cfg.eval.seed,
    };
    let rows = ablation_sweep(&ctx, &g.scales(), &cells)?;
    let csv = sweep_csv(&rows);
    let out = a.out.unwrap_or_else(|| cfg.paths.reports().join("metrics.csv"));
    write_text(&out, &csv)?;
    print!("{csv}");
    info!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::World {
            command: WorldCommand::Generate { count, length, seed, out },
        } => world_generate(cfg, count, length, seed, out),
        Command::Train { command } => match command {
            TrainCommand::Denoiser {
                iterations,
                seed,
                dataset,
                resume,
                out,
            } => train_denoiser(cfg, iterations, seed, dataset, resume, out),
            TrainCommand::Capp {
                iterations,
                seed,
                dataset,
                out,
            } => train_capp_cmd(cfg, iterations, seed, dataset, out),
        },
        Command::Generate(a) => generate(cfg, a),
        Command::Evaluate(a) => evaluate(cfg, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
