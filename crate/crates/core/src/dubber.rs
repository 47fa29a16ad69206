//! Autoregressive re-synthesis of the masked mouth region from new audio.

use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audiofeat::{align_window, compute_mel, resample_to_16k, AudioWindow, MelStats, Waveform, N_MELS, WINDOW_ROWS};
use crate::condnet::checkpoint::LoadedCheckpoint;
use crate::condnet::{Mode, UNet};
use crate::dataset::{write_frames, write_json};
use crate::error::{invalid, Error, Result};
use crate::raster::{BinaryMask, Image};
use crate::rng::{derive_seed, domain};
use crate::schedule::NoiseSchedule;
use crate::trainer::standard_normal_image;
use crate::videoprep::{assemble_input, FPS};

pub const RESULT_FILE: &str = "result.json";

/// A trained network with the schedule and feature statistics it was trained with.
pub struct DubModel {
    pub model: UNet,
    pub schedule: NoiseSchedule,
    pub mel_stats: MelStats,
    pub fingerprint: String,
}

impl DubModel {
    pub fn new(model: UNet, schedule: NoiseSchedule, mel_stats: MelStats, fingerprint: String) -> Result<Self> {
        mel_stats.validate()?;
        Ok(Self {
            model,
            schedule,
            mel_stats,
            fingerprint,
        })
    }

    pub fn from_checkpoint(ckpt: LoadedCheckpoint) -> Result<Self> {
        let schedule = ckpt.meta.schedule.build()?;
        Self::new(ckpt.model, schedule, ckpt.meta.mel_stats, ckpt.meta.fingerprint)
    }

    /// Schedule for `steps` reverse steps (`None` = the full training length).
    pub fn inference_schedule(&self, steps: Option<usize>) -> Result<NoiseSchedule> {
        let total = self.schedule.num_steps();
        let k = steps.unwrap_or(total);
        if k > total {
            return Err(invalid!("{k} inference steps requested, model was trained with {total}"));
        }
        self.schedule.respace(k)
    }
}

/// Source frames (at the model resolution) with their masks, plus the new audio.
#[derive(Debug, Clone)]
pub struct DubRequest {
    pub frames: Vec<Image>,
    pub masks: Vec<BinaryMask>,
    pub audio: Waveform,
    /// `None` runs every step of the training schedule.
    pub inference_steps: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DubMetadata {
    pub num_frames: usize,
    pub steps_used: usize,
    pub seed: u64,
    pub fingerprint: String,
    /// Wall time per frame in seconds; frame 0 is copied and costs nothing.
    pub frame_seconds: Vec<f64>,
}

impl DubMetadata {
    /// Mean wall time over the edited frames.
    pub fn mean_edit_seconds(&self) -> f64 {
        let edited = &self.frame_seconds[1.min(self.frame_seconds.len())..];
        if edited.is_empty() {
            0.0
        } else {
            edited.iter().sum::<f64>() / edited.len() as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct DubResult {
    pub frames: Vec<Image>,
    pub meta: DubMetadata,
}

/// `mask · generated + (1 − mask) · original`, clamped to [−1, 1].
pub fn composite(generated: &Image, original: &Image, mask: &BinaryMask) -> Result<Image> {
    generated.ensure_same_shape(original, "composite")?;
    mask.check_matches(original)?;
    let (c, h, w) = original.shape();
    let mut out = original.clone();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let i = original.index(ch, y, x);
                let v = if mask.is_set(y, x) {
                    generated.data()[i]
                } else {
                    original.data()[i]
                };
                out.data_mut()[i] = v.clamp(-1.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Copies `original` into every unmasked pixel of `y`.
fn reclamp(y: &mut [f32], original: &Image, mask: &BinaryMask) {
    let plane = mask.height() * mask.width();
    for (i, v) in y.iter_mut().enumerate() {
        if mask.data()[i % plane] == 0 {
            *v = original.data()[i];
        }
    }
}

/// Regenerates the masked region of one frame by running the reverse chain
/// of `schedule` from pure noise.
#[allow(clippy::too_many_arguments)]
pub fn edit_frame(
    original: &Image,
    mask: &BinaryMask,
    previous: &Image,
    identity: &Image,
    z: &AudioWindow,
    model: &UNet,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Image> {
    let cfg = model.config();
    let (c, h, w) = original.shape();
    if c != 3 || h != cfg.image_size || w != cfg.image_size {
        return Err(invalid!(
            "frame is {c}x{h}x{w}, model expects 3x{0}x{0}",
            cfg.image_size
        ));
    }
    mask.check_matches(original)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = standard_normal_image(&mut rng, c, h, w).into_data();
    reclamp(&mut y, original, mask);
    let include_mask = cfg.in_channels == 10;
    let audio = Tensor::from_slice(z.values(), (1, WINDOW_ROWS, N_MELS), model.device())?;
    for t in (0..schedule.num_steps()).rev() {
        let current = Image::new(c, h, w, y)?;
        let input = assemble_input(&current, previous, identity, mask, include_mask)?;
        let x = input.stack().to_tensor(model.device(), model.dtype())?;
        let eps_hat = model.forward(&x, &audio, &[schedule.alpha_bars()[t]], &mut Mode::Eval)?;
        let eps_hat = eps_hat.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let noise = (t > 0).then(|| standard_normal_image(&mut rng, c, h, w).into_data());
        y = schedule.reverse_step(current.data(), &eps_hat, t, noise.as_deref())?;
        reclamp(&mut y, original, mask);
    }
    composite(&Image::new(c, h, w, y)?, original, mask)
}

/// Normalized conditioning windows for `n_frames` frames of `audio`, after
/// trimming the audio to the video length.
pub fn audio_windows(audio: &Waveform, n_frames: usize, stats: &MelStats) -> Result<Vec<AudioWindow>> {
    let rate = audio.sample_rate() as u64;
    let needed = (n_frames as u64 * rate).div_ceil(FPS as u64) as usize;
    if audio.len() < needed {
        return Err(invalid!(
            "audio lasts {:.3} s but the video needs {:.3} s",
            audio.duration_secs(),
            n_frames as f64 / FPS as f64
        ));
    }
    let trimmed = audio.truncated(needed);
    let spec = compute_mel(&resample_to_16k(&trimmed)?)?.normalized(stats)?;
    (0..n_frames).map(|i| align_window(&spec, i, n_frames)).collect()
}

/// Dubs a whole clip frame by frame.
///
/// Frame 0 is returned unedited and serves as the identity frame; frame
/// `i ≥ 1` is conditioned on the generated frame `i − 1`.
pub fn dub_video(req: &DubRequest, dub: &DubModel) -> Result<DubResult> {
    let n = req.frames.len();
    if n == 0 {
        return Err(invalid!("video has no frames"));
    }
    if req.masks.len() != n {
        return Err(invalid!("{} masks for {n} frames", req.masks.len()));
    }
    let schedule = dub.inference_schedule(req.inference_steps)?;
    let windows = audio_windows(&req.audio, n, &dub.mel_stats)?;
    let identity = &req.frames[0];
    let mut frames = Vec::with_capacity(n);
    let mut seconds = Vec::with_capacity(n);
    frames.push(identity.clone());
    seconds.push(0.0);
    for i in 1..n {
        let start = Instant::now();
        let seed = derive_seed(req.seed, domain::DUB_FRAME, i as u64);
        let out = edit_frame(
            &req.frames[i],
            &req.masks[i],
            &frames[i - 1],
            identity,
            &windows[i],
            &dub.model,
            &schedule,
            seed,
        )
        .map_err(|e| Error::UnprocessableFrame {
            frame: i,
            reason: e.to_string(),
        })?;
        seconds.push(start.elapsed().as_secs_f64());
        frames.push(out);
    }
    Ok(DubResult {
        frames,
        meta: DubMetadata {
            num_frames: n,
            steps_used: schedule.num_steps(),
            seed: req.seed,
            fingerprint: dub.fingerprint.clone(),
            frame_seconds: seconds,
        },
    })
}

/// Writes `out/frames/%06d.png` and `out/result.json`.
pub fn write_dub_output(out_dir: &Path, result: &DubResult) -> Result<()> {
    write_frames(out_dir, &result.frames)?;
    write_json(&out_dir.join(RESULT_FILE), &result.meta)
}

/// The CPU device used for inference.
pub fn default_device() -> Device {
    Device::Cpu
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(v: f32) -> Image {
        Image::filled(3, 4, 4, v)
    }

    #[test]
    fn composite_selects_by_mask() {
        let mut gen = img(0.25);
        gen.set(1, 2, 2, 3.0);
        let orig = img(-0.5);
        assert_eq!(composite(&gen, &orig, &BinaryMask::full(4, 4, false)).unwrap(), orig);
        assert_eq!(
            composite(&gen, &orig, &BinaryMask::full(4, 4, true)).unwrap(),
            gen.map(|v| v.clamp(-1.0, 1.0))
        );
        let mut checker = BinaryMask::full(4, 4, false);
        for y in 0..4 {
            for x in 0..4 {
                checker.set(y, x, (x + y) % 2 == 0);
            }
        }
        let out = composite(&gen, &orig, &checker).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let m = if (x + y) % 2 == 0 { 1.0 } else { 0.0 };
                    let want = (m * gen.get(c, y, x) + (1.0 - m) * orig.get(c, y, x)).clamp(-1.0, 1.0);
                    assert_eq!(out.get(c, y, x), want);
                }
            }
        }
    }

    #[test]
    fn short_audio_is_rejected() {
        let audio = Waveform::new(vec![0.0; 16_000], 16_000).unwrap();
        let stats = MelStats::identity();
        assert!(audio_windows(&audio, 26, &stats).is_err());
        assert_eq!(audio_windows(&audio, 25, &stats).unwrap().len(), 25);
        let longer = Waveform::new(vec![0.0; 20_000], 16_000).unwrap();
        assert_eq!(audio_windows(&longer, 25, &stats).unwrap(), audio_windows(&audio, 25, &stats).unwrap());
    }
}
