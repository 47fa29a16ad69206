//! `lipdiff`: synthesize data, preprocess, train, dub and evaluate.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::DType;
use clap::{Args, Parser, Subcommand, ValueEnum};
use lipdiff::audiofeat::{compute_mel, resample_to_16k, write_feature_file, MelStats, Waveform};
use lipdiff::condnet::checkpoint::load_checkpoint;
use lipdiff::config::{fingerprint_str, RunConfig};
use lipdiff::dataset::{
    read_clip, read_frames, read_json, read_manifest, write_json, write_manifest, ClipMeta, PreparedClip, Split,
    AUDIO_FILE, FEATURES_FILE, LANDMARKS_FILE, META_FILE,
};
use lipdiff::dubber::{dub_video, write_dub_output, DubMetadata, DubModel, DubRequest, RESULT_FILE};
use lipdiff::metrics::{evaluate, write_report_csv, write_report_json, ClipPair, RegionMode};
use lipdiff::raster::{BinaryMask, Image};
use lipdiff::synthgen::{make_dataset, measure_aperture, DatasetSpec};
use lipdiff::trainer::{latest_checkpoint, train_loop, TrainRun, TrainingSet};
use lipdiff::videoprep::{compute_mask, FaceLandmarks, FPS};
use lipdiff::{dataset, Error};
use tracing::info;

#[derive(Parser)]
#[command(name = "lipdiff", version, about = "Audio-driven mouth re-synthesis with a conditional diffusion model")]
struct Cli {
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic talking-sprite dataset.
    SynthData(SynthArgs),
    /// Cache log-mel features and record training-set statistics.
    Preprocess(PreprocessArgs),
    /// Train a model on a preprocessed dataset.
    Train(TrainArgs),
    /// Re-synthesize the mouth region of a clip to match new audio.
    Dub(DubArgs),
    /// Score generated clips against references.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    identities: usize,
    #[arg(long, default_value_t = 10)]
    clips: usize,
    /// Clip length in seconds.
    #[arg(long, default_value_t = 3.0)]
    duration: f64,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Identities reserved for the test split.
    #[arg(long, default_value_t = 1)]
    held_out: usize,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    dataset: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration; defaults to the small CPU preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Run directory for checkpoints and the loss log.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint directory to continue from, or `latest`.
    #[arg(long)]
    resume: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    image_size: Option<usize>,
    /// Config override, e.g. `--set train.learning_rate=1e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct DubArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Source clip directory (frames, landmarks.json, meta.json, audio.wav).
    #[arg(long)]
    video: PathBuf,
    /// New audio track (WAV).
    #[arg(long)]
    audio: PathBuf,
    /// Reverse steps per frame: a count or `full`.
    #[arg(long, default_value = "full")]
    steps: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sample with the EMA weights when the checkpoint has them.
    #[arg(long)]
    ema: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Region {
    Masked,
    Full,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Generated clip directory; repeat for several clips.
    #[arg(long, required = true)]
    generated: Vec<PathBuf>,
    /// Reference clip directory, one per `--generated`.
    #[arg(long, required = true)]
    reference: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "masked")]
    region: Region,
    /// Also report the aperture/RMS correlation against each generated clip's audio.wav.
    #[arg(long)]
    sync: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

type CliResult<T> = Result<T, Error>;

fn bad_arg(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) => 2,
        Error::Data(_)
        | Error::UnprocessableClip(_)
        | Error::UnprocessableFrame { .. }
        | Error::Io { .. }
        | Error::Image { .. }
        | Error::Wav { .. }
        | Error::Json(_) => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { tracing::Level::WARN } else { tracing::Level::INFO };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
    let result = match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train(a),
        Command::Dub(a) => dub(a),
        Command::Evaluate(a) => evaluate_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn synth_data(a: SynthArgs) -> CliResult<()> {
    let spec = DatasetSpec {
        n_identities: a.identities,
        clips_per_identity: a.clips,
        duration_s: a.duration,
        image_size: a.image_size,
        seed: a.seed,
        held_out_identities: a.held_out,
    };
    if a.duration.is_nan() || a.duration <= 0.0 {
        return Err(bad_arg("--duration must be positive"));
    }
    spec.validate()?;
    let manifest = make_dataset(&spec, &a.out)?;
    info!(clips = manifest.clips.len(), out = %a.out.display(), "dataset written");
    Ok(())
}

fn preprocess(a: PreprocessArgs) -> CliResult<()> {
    let mut manifest = read_manifest(&a.dataset)?;
    let mut train_specs = Vec::new();
    for entry in &manifest.clips {
        let dir = a.dataset.join(&entry.path);
        let clip = read_clip(&dir)?;
        let spec = compute_mel(&resample_to_16k(&clip.audio)?)?;
        write_feature_file(&dir.join(FEATURES_FILE), &spec, None)?;
        // Fails early on clips whose landmarks cannot be cropped or masked.
        PreparedClip::from_clip(&entry.path, &clip, manifest.image_size, Some(&dir))
            .map_err(|e| Error::UnprocessableClip(format!("{}: {e}", entry.path)))?;
        if entry.split == Split::Train {
            train_specs.push(spec);
        }
    }
    if train_specs.is_empty() {
        return Err(Error::Data("manifest has no training clips".into()));
    }
    manifest.mel_stats = Some(MelStats::from_spectrograms(train_specs.iter())?);
    write_manifest(&a.dataset, &manifest)?;
    info!(clips = manifest.clips.len(), "features cached");
    Ok(())
}

fn train(a: TrainArgs) -> CliResult<()> {
    let base = match &a.config {
        Some(path) => RunConfig::load(path)?.0,
        None => RunConfig::desk(a.image_size.unwrap_or(64)),
    };
    let mut cfg = base.with_overrides(&a.overrides)?;
    if let Some(d) = a.dataset {
        cfg.data.dataset = Some(d);
    }
    if let Some(o) = a.out {
        cfg.data.output = Some(o);
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(m) = a.max_steps {
        cfg.train.max_steps = Some(m);
    }
    if let Some(s) = a.image_size {
        cfg.model.image_size = s;
    }
    cfg.validate()?;
    let root = cfg.data.dataset.clone().ok_or_else(|| bad_arg("no dataset given (--dataset or data.dataset)"))?;
    let out = cfg.data.output.clone().ok_or_else(|| bad_arg("no output directory given (--out or data.output)"))?;
    let resume = match a.resume.as_deref() {
        None => None,
        Some("latest") => Some(latest_checkpoint(&out)?),
        Some(p) => Some(PathBuf::from(p)),
    };
    if let Some(r) = &resume {
        if !r.is_dir() {
            return Err(bad_arg(format!("checkpoint {} does not exist", r.display())));
        }
    }

    let manifest = read_manifest(&root)?;
    let clips = dataset::load_prepared(&root, &manifest, Split::Train, cfg.model.image_size)?;
    let set = TrainingSet::new(clips, manifest.mel_stats.clone())?;
    let text = cfg.to_toml()?;
    let fingerprint = cfg.fingerprint()?;
    std::fs::create_dir_all(&out).map_err(|e| Error::Data(format!("creating {}: {e}", out.display())))?;
    std::fs::write(out.join("config.toml"), &text).map_err(|e| Error::Data(format!("writing config: {e}")))?;
    info!(pairs = set.pairs().len(), fingerprint = %fingerprint, seed = cfg.train.seed, "training");
    let outcome = train_loop(
        &set,
        &TrainRun {
            train: cfg.train.clone(),
            model: cfg.model.clone(),
            schedule: cfg.schedule.clone(),
            run_config_text: text,
            fingerprint,
            out_dir: out,
            resume,
        },
    )?;
    let last = outcome.checkpoints.last().expect("train_loop always saves");
    info!(step = outcome.final_step, checkpoint = %last.display(), "done");
    Ok(())
}

fn parse_steps(s: &str) -> CliResult<Option<usize>> {
    if s == "full" {
        return Ok(None);
    }
    match s.parse::<usize>() {
        Ok(n) if n > 0 => Ok(Some(n)),
        _ => Err(bad_arg(format!("--steps must be a positive count or `full`, got {s:?}"))),
    }
}

fn dub(a: DubArgs) -> CliResult<()> {
    let steps = parse_steps(&a.steps)?;
    for (flag, p) in [("--checkpoint", &a.checkpoint), ("--video", &a.video), ("--audio", &a.audio)] {
        if !p.exists() {
            return Err(bad_arg(format!("{flag} {} does not exist", p.display())));
        }
    }
    let ckpt = load_checkpoint(&a.checkpoint, &lipdiff::dubber::default_device(), DType::F32)?;
    if a.ema && !ckpt.use_ema()? {
        return Err(bad_arg("checkpoint has no EMA weights"));
    }
    let model = DubModel::from_checkpoint(ckpt)?;
    model.inference_schedule(steps)?;
    let size = model.model.config().image_size;
    let clip = read_clip(&a.video)?;
    let name = a.video.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
    let prepared = PreparedClip::from_clip(&name, &clip, size, None)?;
    let audio = Waveform::read_wav(&a.audio)?;
    let req = DubRequest {
        frames: prepared.frames.clone(),
        masks: prepared.masks.clone(),
        audio: audio.clone(),
        inference_steps: steps,
        seed: a.seed,
    };
    info!(frames = req.frames.len(), steps = %a.steps, seed = a.seed, "dubbing");
    let result = dub_video(&req, &model)?;
    write_dub_output(&a.out, &result)?;
    let n = result.frames.len();
    let needed = (n as u64 * audio.sample_rate() as u64).div_ceil(FPS as u64) as usize;
    audio.truncated(needed).write_wav(&a.out.join(AUDIO_FILE))?;
    write_json(&a.out.join(LANDMARKS_FILE), &prepared.landmarks)?;
    write_json(
        &a.out.join(META_FILE),
        &ClipMeta {
            fps: FPS,
            identity: clip.meta.identity.clone(),
            split: clip.meta.split,
            num_frames: n,
            seed: Some(a.seed),
        },
    )?;
    info!(
        out = %a.out.display(),
        mean_frame_seconds = result.meta.mean_edit_seconds(),
        "dub written"
    );
    Ok(())
}

/// Frames and masks of one generated / reference pair at a common resolution.
struct LoadedPair {
    name: String,
    generated: Vec<Image>,
    reference: Vec<Image>,
    masks: Vec<BinaryMask>,
    audio: Option<Waveform>,
}

fn masks_from_landmarks(path: &Path, n: usize, h: usize, w: usize) -> CliResult<Vec<BinaryMask>> {
    let lms: Vec<FaceLandmarks> = read_json(path)?;
    if lms.len() != n {
        return Err(Error::Data(format!("{}: {} landmark sets for {n} frames", path.display(), lms.len())));
    }
    lms.iter().map(|lm| Ok(compute_mask(lm, w, h)?.rasterize(h, w))).collect()
}

/// Dub outputs (marked by `result.json`) hold aligned crops, so their
/// reference clip is cropped the same way; other pairs are compared as stored.
fn load_pair(gen_dir: &Path, ref_dir: &Path, region: RegionMode, sync: bool) -> CliResult<LoadedPair> {
    let generated = read_frames(gen_dir)?;
    let (h, w) = (generated[0].height(), generated[0].width());
    let is_dub = gen_dir.join(RESULT_FILE).exists();
    let (reference, ref_masks) = if is_dub && ref_dir.join(META_FILE).exists() {
        let clip = read_clip(ref_dir)?;
        let p = PreparedClip::from_clip("reference", &clip, h, None)?;
        (p.frames, Some(p.masks))
    } else {
        (read_frames(ref_dir)?, None)
    };
    let n = generated.len();
    if reference.len() < n {
        return Err(Error::Data(format!(
            "{}: reference has {} frames, generated has {n}",
            ref_dir.display(),
            reference.len()
        )));
    }
    let reference: Vec<Image> = reference.into_iter().take(n).collect();
    let masks = match region {
        RegionMode::FullFrame => vec![BinaryMask::full(h, w, true); n],
        RegionMode::MaskedRegion => {
            if gen_dir.join(LANDMARKS_FILE).exists() {
                masks_from_landmarks(&gen_dir.join(LANDMARKS_FILE), n, h, w)?
            } else if let Some(m) = ref_masks {
                m.into_iter().take(n).collect()
            } else if ref_dir.join(LANDMARKS_FILE).exists() {
                let all: Vec<FaceLandmarks> = read_json(&ref_dir.join(LANDMARKS_FILE))?;
                all.iter()
                    .take(n)
                    .map(|lm| Ok(compute_mask(lm, w, h)?.rasterize(h, w)))
                    .collect::<CliResult<Vec<_>>>()?
            } else {
                return Err(Error::Data(format!(
                    "no landmarks.json next to {} or {}; use --region full",
                    gen_dir.display(),
                    ref_dir.display()
                )));
            }
        }
    };
    let audio = if sync {
        Some(Waveform::read_wav(&gen_dir.join(AUDIO_FILE))?)
    } else {
        None
    };
    let name = gen_dir.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
    Ok(LoadedPair {
        name,
        generated,
        reference,
        masks,
        audio,
    })
}

fn evaluate_cmd(a: EvaluateArgs) -> CliResult<()> {
    if a.generated.len() != a.reference.len() {
        return Err(bad_arg(format!(
            "{} --generated but {} --reference directories",
            a.generated.len(),
            a.reference.len()
        )));
    }
    for p in a.generated.iter().chain(&a.reference) {
        if !p.is_dir() {
            return Err(bad_arg(format!("{} is not a directory", p.display())));
        }
    }
    let region = match a.region {
        Region::Masked => RegionMode::MaskedRegion,
        Region::Full => RegionMode::FullFrame,
    };
    // Stamp the report with the producing run when the inputs are dub outputs.
    let dub_meta: Option<DubMetadata> = a
        .generated
        .iter()
        .map(|g| g.join(RESULT_FILE))
        .find(|p| p.exists())
        .map(|p| read_json(&p))
        .transpose()?;
    let fingerprint = match &dub_meta {
        Some(m) => m.fingerprint.clone(),
        None => fingerprint_str(&format!("evaluate:{:?}:{:?}:{:?}", a.generated, a.reference, region)),
    };
    let seed = a.seed.or(dub_meta.as_ref().map(|m| m.seed)).unwrap_or(0);

    let loaded = a
        .generated
        .iter()
        .zip(&a.reference)
        .map(|(g, r)| load_pair(g, r, region, a.sync))
        .collect::<CliResult<Vec<_>>>()?;
    let pairs: Vec<ClipPair<'_>> = loaded
        .iter()
        .map(|l| ClipPair {
            name: l.name.clone(),
            generated: &l.generated,
            reference: &l.reference,
            masks: &l.masks,
            audio: l.audio.as_ref(),
        })
        .collect();
    let report = evaluate(&pairs, region, &measure_aperture, &fingerprint, seed)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Data(format!("creating {}: {e}", a.out.display())))?;
    write_report_json(&a.out.join("report.json"), &report)?;
    write_report_csv(&a.out.join("report.csv"), &report)?;
    info!(
        ssim = report.aggregate.ssim,
        psnr_db = report.aggregate.psnr_db,
        out = %a.out.display(),
        "report written"
    );
    Ok(())
}
