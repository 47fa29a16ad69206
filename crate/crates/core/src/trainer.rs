//! Masked noise-prediction objective, Adam and the training loop.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audiofeat::{AudioWindow, MelStats, N_MELS, WINDOW_ROWS};
use crate::condnet::checkpoint::{load_checkpoint, save_checkpoint, CheckpointContents, CheckpointMeta};
use crate::condnet::{Mode, ParamStore, UNet, UNetConfig};
use crate::dataset::PreparedClip;
use crate::error::{invalid, Error, Result};
use crate::raster::{BinaryMask, Image};
use crate::rng::{derive_seed, domain, stream_rng};
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::videoprep::{apply_forward_noise, assemble_input};

pub const LOSS_LOG_FILE: &str = "loss.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LATEST_FILE: &str = "latest";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMaskMode {
    #[default]
    MaskedRegion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops early once this many optimizer steps have run in total.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ema_decay: Option<f64>,
    pub seed: u64,
    #[serde(default)]
    pub loss_mask_mode: LossMaskMode,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Upper bound of the per-example standard deviation of Gaussian noise
    /// added to the previous frame inside its mask. 0 disables it.
    #[serde(default)]
    pub prev_frame_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 16,
            epochs: 1,
            max_steps: None,
            ema_decay: None,
            seed: 0,
            loss_mask_mode: LossMaskMode::MaskedRegion,
            checkpoint_every: 0,
            prev_frame_noise: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return Err(invalid!("batch size must be at least 1"));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(invalid!("EMA decay must be in [0, 1), got {d}"));
            }
        }
        if !(self.prev_frame_noise >= 0.0 && self.prev_frame_noise.is_finite()) {
            return Err(invalid!("previous-frame noise must be finite and >= 0, got {}", self.prev_frame_noise));
        }
        Ok(())
    }
}

/// Mean squared error over the elements selected by `mask`.
///
/// `eps_hat` and `eps` are `[B, 3, H, W]`, `mask` is `[B, 1, H, W]` with
/// values in {0, 1}. Unmasked elements are multiplied by zero before
/// squaring, so they contribute nothing to the value or the gradient.
pub fn masked_loss(eps_hat: &Tensor, eps: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if eps_hat.dims() != eps.dims() {
        return Err(invalid!("prediction shape {:?} != target shape {:?}", eps_hat.dims(), eps.dims()));
    }
    let (b, c, h, w) = eps.dims4()?;
    if mask.dims() != [b, 1, h, w] {
        return Err(invalid!("mask shape {:?} != [{b}, 1, {h}, {w}]", mask.dims()));
    }
    let selected = mask.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    if selected == 0.0 {
        return Err(invalid!("loss mask selects no pixels"));
    }
    let mask = mask.to_dtype(eps_hat.dtype())?;
    let diff = (eps_hat - eps)?.broadcast_mul(&mask)?;
    Ok((diff.sqr()?.sum_all()? / (selected * c as f64))?)
}

/// `masked_loss` on single images, evaluated in double precision.
pub fn masked_loss_images(eps_hat: &Image, eps: &Image, mask: &BinaryMask) -> Result<f64> {
    eps_hat.ensure_same_shape(eps, "masked_loss")?;
    mask.check_matches(eps)?;
    let dev = Device::Cpu;
    let a = eps_hat.to_tensor(&dev, DType::F64)?;
    let b = eps.to_tensor(&dev, DType::F64)?;
    let m = mask.to_tensor(1, &dev, DType::F64)?;
    Ok(masked_loss(&a, &b, &m)?.to_scalar::<f64>()?)
}

/// Adam without weight decay or gradient clipping.
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(learning_rate: f64, store: &ParamStore) -> Result<Self> {
        let mut moments = BTreeMap::new();
        for (name, var) in store.vars() {
            let z = var.as_tensor().zeros_like()?;
            moments.insert(name.clone(), (z.clone(), z));
        }
        Ok(Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, var) in store.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let (m, v) = self.moments.get_mut(name).expect("moments cover every parameter");
            *m = ((&*m * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            *v = ((&*v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = ((&*v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&*m / bc1)? / denom)?;
            let next = (var.as_tensor().detach() - (update * self.learning_rate)?)?;
            var.set(&next)?;
        }
        Ok(())
    }

    /// Moment tensors plus the step counter, for checkpointing.
    pub fn state(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (name, (m, v)) in &self.moments {
            out.insert(format!("m.{name}"), m.clone());
            out.insert(format!("v.{name}"), v.clone());
        }
        out.insert("step".into(), Tensor::new(&[self.step as f64], &Device::Cpu)?);
        Ok(out)
    }

    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, (m, v)) in self.moments.iter_mut() {
            let get = |key: String| {
                state
                    .get(&key)
                    .cloned()
                    .ok_or_else(|| Error::Data(format!("optimizer state is missing {key}")))
            };
            *m = get(format!("m.{name}"))?.to_dtype(m.dtype())?;
            *v = get(format!("v.{name}"))?.to_dtype(v.dtype())?;
        }
        let step = state
            .get("step")
            .ok_or_else(|| Error::Data("optimizer state is missing step".into()))?;
        self.step = step.to_vec1::<f64>()?[0] as u64;
        Ok(())
    }
}

/// Exponential moving average of the parameters.
pub struct Ema {
    decay: f64,
    shadow: BTreeMap<String, Tensor>,
}

impl Ema {
    pub fn new(decay: f64, store: &ParamStore) -> Self {
        Self {
            decay,
            shadow: store.tensors(),
        }
    }

    pub fn from_tensors(decay: f64, shadow: BTreeMap<String, Tensor>) -> Self {
        Self { decay, shadow }
    }

    pub fn update(&mut self, store: &ParamStore) -> Result<()> {
        for (name, var) in store.vars() {
            if let Some(s) = self.shadow.get_mut(name) {
                *s = ((&*s * self.decay)? + (var.as_tensor().detach() * (1.0 - self.decay))?)?;
            }
        }
        Ok(())
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.shadow
    }
}

/// Prepared clips with their normalized audio windows.
pub struct TrainingSet {
    pub clips: Vec<PreparedClip>,
    pub windows: Vec<Vec<AudioWindow>>,
    pub mel_stats: MelStats,
    pub image_size: usize,
}

impl TrainingSet {
    /// Uses `stats` when given, otherwise computes them from `clips`.
    pub fn new(clips: Vec<PreparedClip>, stats: Option<MelStats>) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let image_size = clips[0].frames[0].height();
        if clips.iter().any(|c| c.frames.iter().any(|f| f.height() != image_size || f.width() != image_size)) {
            return Err(Error::Data("training frames differ in size".into()));
        }
        let mel_stats = match stats {
            Some(s) => s,
            None => MelStats::from_spectrograms(clips.iter().map(|c| &c.mel))?,
        };
        mel_stats.validate()?;
        let windows = clips.iter().map(|c| c.windows(&mel_stats)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            clips,
            windows,
            mel_stats,
            image_size,
        })
    }

    /// Every `(clip, frame)` pair with a predecessor, i.e. frame index ≥ 1.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.clips
            .iter()
            .enumerate()
            .flat_map(|(c, clip)| (1..clip.num_frames()).map(move |i| (c, i)))
            .collect()
    }
}

/// One assembled minibatch.
pub struct StepBatch {
    pub inputs: Tensor,
    pub audio: Tensor,
    pub alpha_bars: Vec<f64>,
    pub timesteps: Vec<usize>,
    pub noise: Tensor,
    pub mask: Tensor,
    pub ids: Vec<String>,
}

pub fn sample_timestep(rng: &mut ChaCha8Rng, num_steps: usize) -> usize {
    rng.random_range(0..num_steps)
}

pub fn standard_normal_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Image {
    let data = (0..c * h * w).map(|_| StandardNormal.sample(rng)).collect();
    Image::new(c, h, w, data).expect("size matches")
}

/// Frame `i − 1` with `N(0, σ²)` noise inside its mask, `σ ~ U(0, max_std)`.
///
/// Imitates the artifacts a generated previous frame carries at inference,
/// where only the masked region is synthesized.
fn perturb_previous(frame: &Image, mask: &BinaryMask, max_std: f64, rng: &mut ChaCha8Rng) -> Image {
    let std = rng.random_range(0.0..max_std) as f32;
    let noise = standard_normal_image(rng, frame.channels(), frame.height(), frame.width());
    let mut out = frame.clone();
    let plane = frame.height() * frame.width();
    for (k, (v, z)) in out.data_mut().iter_mut().zip(noise.data()).enumerate() {
        if mask.data()[k % plane] != 0 {
            *v += std * z;
        }
    }
    out
}

/// Noises frame `i` inside its mask at a per-example random step and stacks
/// it with frame `i − 1` (optionally perturbed, see [`TrainConfig::prev_frame_noise`])
/// and frame 0.
#[allow(clippy::too_many_arguments)]
pub fn build_batch(
    set: &TrainingSet,
    pairs: &[(usize, usize)],
    schedule: &NoiseSchedule,
    include_mask_channel: bool,
    prev_frame_noise: f64,
    rng: &mut ChaCha8Rng,
    device: &Device,
) -> Result<StepBatch> {
    let s = set.image_size;
    let mut inputs = Vec::new();
    let mut audio = Vec::with_capacity(pairs.len() * WINDOW_ROWS * N_MELS);
    let mut noise = Vec::with_capacity(pairs.len() * 3 * s * s);
    let mut mask = Vec::with_capacity(pairs.len() * s * s);
    let mut alpha_bars = Vec::new();
    let mut timesteps = Vec::new();
    let mut ids = Vec::new();
    for &(c, i) in pairs {
        if i == 0 {
            return Err(invalid!("frame 0 is never a training target"));
        }
        let clip = &set.clips[c];
        let t = sample_timestep(rng, schedule.num_steps());
        let eps = standard_normal_image(rng, 3, s, s);
        let noisy = apply_forward_noise(&clip.frames[i], &clip.masks[i], t, &eps, schedule)?;
        let perturbed;
        let previous = if prev_frame_noise > 0.0 {
            perturbed = perturb_previous(&clip.frames[i - 1], &clip.masks[i - 1], prev_frame_noise, rng);
            &perturbed
        } else {
            &clip.frames[i - 1]
        };
        let input = assemble_input(&noisy, previous, &clip.frames[0], &clip.masks[i], include_mask_channel)?;
        inputs.extend_from_slice(input.stack().data());
        audio.extend_from_slice(set.windows[c][i].values());
        noise.extend_from_slice(eps.data());
        mask.extend(clip.masks[i].to_f32());
        alpha_bars.push(schedule.alpha_bar(t)?);
        timesteps.push(t);
        ids.push(format!("{}#{i}", clip.name));
    }
    let b = pairs.len();
    let channels = if include_mask_channel { 10 } else { 9 };
    Ok(StepBatch {
        inputs: Tensor::from_vec(inputs, (b, channels, s, s), device)?,
        audio: Tensor::from_vec(audio, (b, WINDOW_ROWS, N_MELS), device)?,
        alpha_bars,
        timesteps,
        noise: Tensor::from_vec(noise, (b, 3, s, s), device)?,
        mask: Tensor::from_vec(mask, (b, 1, s, s), device)?,
        ids,
    })
}

/// Forward pass and masked loss for one batch.
pub fn batch_loss(model: &UNet, batch: &StepBatch, mode: &mut Mode<'_>) -> Result<Tensor> {
    let pred = model.forward(&batch.inputs, &batch.audio, &batch.alpha_bars, mode)?;
    let target = batch.noise.to_dtype(pred.dtype())?;
    masked_loss(&pred, &target, &batch.mask)
}

/// One optimizer step on `pairs`; returns the batch loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &UNet,
    store: &ParamStore,
    optimizer: &mut Adam,
    set: &TrainingSet,
    pairs: &[(usize, usize)],
    schedule: &NoiseSchedule,
    prev_frame_noise: f64,
    rng: &mut ChaCha8Rng,
    step: u64,
) -> Result<f64> {
    let include_mask = model.config().in_channels == 10;
    let batch = build_batch(set, pairs, schedule, include_mask, prev_frame_noise, rng, model.device())?;
    let loss = batch_loss(model, &batch, &mut Mode::Train(rng))?;
    let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            timesteps: batch.timesteps,
            batch_ids: batch.ids,
        });
    }
    let grads = loss.backward()?;
    optimizer.step(store, &grads)?;
    Ok(value)
}

/// Everything a training run needs besides the data.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub train: TrainConfig,
    pub model: UNetConfig,
    pub schedule: ScheduleConfig,
    /// Verbatim configuration text stored in every checkpoint.
    pub run_config_text: String,
    pub fingerprint: String,
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_step: u64,
    /// Losses of the steps run in this invocation.
    pub losses: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("step-{step:08}"))
}

/// The most recently written checkpoint of a run directory.
pub fn latest_checkpoint(out_dir: &Path) -> Result<PathBuf> {
    let marker = out_dir.join(CHECKPOINT_DIR).join(LATEST_FILE);
    let name = std::fs::read_to_string(&marker).map_err(|e| Error::io("reading", &marker, e))?;
    Ok(out_dir.join(CHECKPOINT_DIR).join(name.trim()))
}

/// Visiting order of `pairs` in `epoch`, a pure function of the seed.
pub fn epoch_order(pairs: &[(usize, usize)], seed: u64, epoch: u64) -> Vec<(usize, usize)> {
    let mut order = pairs.to_vec();
    order.shuffle(&mut stream_rng(seed, domain::SHUFFLE, epoch));
    order
}

struct LossLog {
    file: std::fs::File,
}

impl LossLog {
    fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists();
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io("opening loss log", path, e))?;
        if fresh {
            writeln!(file, "step,epoch,loss,wall_time").map_err(|e| Error::io("writing loss log", path, e))?;
        }
        Ok(Self { file })
    }

    fn append(&mut self, step: u64, epoch: u64, loss: f64, wall: f64) -> Result<()> {
        writeln!(self.file, "{step},{epoch},{loss:.9e},{wall:.6}")
            .map_err(|e| Error::io("writing loss log", Path::new(LOSS_LOG_FILE), e))
    }
}

/// Iterates shuffled `(clip, frame)` pairs for the configured epochs,
/// logging every step and writing checkpoints under `run.out_dir`.
///
/// Data order and noise depend only on the seed and the global step, so a
/// run resumed from a checkpoint continues exactly as the uninterrupted one.
pub fn train_loop(set: &TrainingSet, run: &TrainRun) -> Result<TrainOutcome> {
    run.train.validate()?;
    run.model.validate()?;
    if run.model.image_size != set.image_size {
        return Err(invalid!(
            "model image size {} does not match data size {}",
            run.model.image_size,
            set.image_size
        ));
    }
    let schedule = run.schedule.build()?;
    let pairs = set.pairs();
    if pairs.is_empty() {
        return Err(Error::Data("dataset has no frames with a predecessor".into()));
    }
    std::fs::create_dir_all(&run.out_dir).map_err(|e| Error::io("creating output directory", &run.out_dir, e))?;

    let device = Device::Cpu;
    let seed = run.train.seed;
    let (store, model, mut optimizer, mut ema, start) = match &run.resume {
        Some(dir) => {
            let ckpt = load_checkpoint(dir, &device, DType::F32)?;
            if ckpt.meta.model != run.model || ckpt.meta.schedule != run.schedule {
                return Err(invalid!("checkpoint {} was trained with a different model or schedule", dir.display()));
            }
            let mut opt = Adam::new(run.train.learning_rate, &ckpt.store)?;
            if let Some(state) = ckpt.optimizer_state()? {
                opt.load_state(&state)?;
            }
            let ema = match (run.train.ema_decay, ckpt.ema_weights()?) {
                (Some(d), Some(w)) => Some(Ema::from_tensors(d, w)),
                (Some(d), None) => Some(Ema::new(d, &ckpt.store)),
                (None, _) => None,
            };
            let step = ckpt.meta.step;
            (ckpt.store, ckpt.model, opt, ema, step)
        }
        None => {
            let mut store = ParamStore::new(derive_seed(seed, domain::INIT, 0), &device, DType::F32);
            let model = UNet::new(&run.model, &mut store)?;
            let opt = Adam::new(run.train.learning_rate, &store)?;
            let ema = run.train.ema_decay.map(|d| Ema::new(d, &store));
            (store, model, opt, ema, 0)
        }
    };

    let batch = run.train.batch_size.min(pairs.len());
    let steps_per_epoch = pairs.len().div_ceil(batch) as u64;
    let mut total = steps_per_epoch * run.train.epochs as u64;
    if let Some(cap) = run.train.max_steps {
        total = total.min(cap);
    }

    let mut log = LossLog::open(&run.out_dir.join(LOSS_LOG_FILE))?;
    let clock = Instant::now();
    let mut losses = Vec::new();
    let mut checkpoints = Vec::new();
    let mut order: Option<(u64, Vec<(usize, usize)>)> = None;
    let save = |step: u64, optimizer: &Adam, ema: &Option<Ema>| -> Result<PathBuf> {
        let dir = checkpoint_path(&run.out_dir, step);
        save_checkpoint(
            &dir,
            CheckpointContents {
                meta: CheckpointMeta {
                    model: run.model.clone(),
                    schedule: run.schedule.clone(),
                    mel_stats: set.mel_stats.clone(),
                    step,
                    seed,
                    fingerprint: run.fingerprint.clone(),
                    run_config: run.run_config_text.clone(),
                    has_optimizer: true,
                    has_ema: ema.is_some(),
                },
                weights: &store,
                optimizer: Some(optimizer.state()?),
                ema: ema.as_ref().map(|e| e.tensors().clone()),
            },
        )?;
        let marker = run.out_dir.join(CHECKPOINT_DIR).join(LATEST_FILE);
        let name = dir.file_name().expect("checkpoint dir has a name").to_string_lossy().to_string();
        std::fs::write(&marker, format!("{name}\n")).map_err(|e| Error::io("writing", &marker, e))?;
        Ok(dir)
    };

    for step in start..total {
        let epoch = step / steps_per_epoch;
        if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            order = Some((epoch, epoch_order(&pairs, seed, epoch)));
        }
        let ord = &order.as_ref().expect("set above").1;
        let offset = ((step % steps_per_epoch) as usize) * batch;
        let chunk = &ord[offset..(offset + batch).min(ord.len())];
        let mut rng = stream_rng(seed, domain::TRAIN_STEP, step);
        let loss = train_step(
            &model,
            &store,
            &mut optimizer,
            set,
            chunk,
            &schedule,
            run.train.prev_frame_noise,
            &mut rng,
            step,
        )?;
        if let Some(e) = ema.as_mut() {
            e.update(&store)?;
        }
        losses.push(loss);
        log.append(step, epoch, loss, clock.elapsed().as_secs_f64())?;
        let done = step + 1;
        if run.train.checkpoint_every > 0 && done % run.train.checkpoint_every == 0 && done < total {
            checkpoints.push(save(done, &optimizer, &ema)?);
        }
        if done % 50 == 0 {
            tracing::info!(step = done, total, loss, "training");
        }
    }
    let final_step = start.max(total);
    checkpoints.push(save(final_step, &optimizer, &ema)?);
    Ok(TrainOutcome {
        final_step,
        losses,
        checkpoints,
    })
}
