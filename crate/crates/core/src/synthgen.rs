//! Procedural talking sprites whose mouth opening is a known function of the audio.
//!
//! Every clip carries its ground truth: the aperture of frame `i` is the RMS
//! of the 40 ms of audio centered on that frame, so lip sync can be checked
//! without any learned scorer.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audiofeat::{windowed_rms, Waveform, TARGET_SAMPLE_RATE};
use crate::dataset::{write_clip, write_manifest, ClipData, ClipMeta, Manifest, ManifestEntry, Split};
use crate::error::{invalid, Result};
use crate::raster::Image;
use crate::rng::{domain, stream_rng};
use crate::videoprep::{FaceLandmarks, Point, FPS};

/// Audio samples per video frame at 16 kHz / 25 fps.
pub const SAMPLES_PER_FRAME: usize = 640;
/// RMS that maps to a fully open mouth.
pub const APERTURE_RMS_SCALE: f64 = 0.7;
pub const PEAK_AMPLITUDE: f64 = 0.9;
/// Mouth width and maximal opening as fractions of the image side.
pub const MOUTH_WIDTH: f64 = 0.3;
pub const MOUTH_MAX_HEIGHT: f64 = 0.2;
pub const MOUTH_ROW: f64 = 0.7;
/// Mouth color in unit range, far from every face color.
pub const MOUTH_COLOR: [f32; 3] = [0.30, 0.05, 0.10];
const FACE_LEVELS: u32 = 8;
const FACE_BASE: u32 = 115;
const FACE_STEP: u32 = 16;
const TEXTURE_AMPLITUDE: f32 = 0.03;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpriteIdentity {
    pub seed: u64,
    /// Unit-range RGB on a 16/255 grid inside [0.45, 0.89].
    pub face_color: [f32; 3],
    pub eye_color: [f32; 3],
    pub texture_phase: f32,
}

impl SpriteIdentity {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = stream_rng(seed, domain::IDENTITY, 0);
        let mut face = [0.0; 3];
        for c in &mut face {
            *c = (FACE_BASE + FACE_STEP * rng.random_range(0..FACE_LEVELS)) as f32 / 255.0;
        }
        let mut eye = [0.0; 3];
        for c in &mut eye {
            *c = rng.random_range(0.05..0.3);
        }
        Self {
            seed,
            face_color: face,
            eye_color: eye,
            texture_phase: rng.random_range(0.0..std::f32::consts::TAU),
        }
    }

    /// Face color quantized to 8 bits, used for collision checks.
    pub fn face_key(&self) -> [u8; 3] {
        self.face_color.map(|c| (c * 255.0).round() as u8)
    }

    fn skin(&self, x: usize, width: usize) -> [f32; 3] {
        let phase = self.texture_phase + std::f32::consts::TAU * 3.0 * x as f32 / width as f32;
        let t = TEXTURE_AMPLITUDE * phase.sin();
        self.face_color.map(|c| c + t)
    }
}

/// Sum of 2 to 4 sinusoids under a piecewise-linear burst/silence envelope.
pub fn synth_audio(seed: u64, duration_s: f64) -> Result<Waveform> {
    if !(duration_s > 0.0) {
        return Err(invalid!("duration must be positive, got {duration_s}"));
    }
    let rate = TARGET_SAMPLE_RATE as f64;
    let n = (duration_s * rate).round() as usize;
    let mut rng = stream_rng(seed, domain::AUDIO, 0);
    let tones = rng.random_range(2..=4usize);
    let mut partials: Vec<(f64, f64, f64)> = (0..tones)
        .map(|_| {
            (
                rng.random_range(120.0..800.0),
                rng.random_range(0.2..1.0),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let total: f64 = partials.iter().map(|p| p.1).sum();
    for p in &mut partials {
        p.1 /= total;
    }

    let mut envelope = vec![0.0f64; n];
    let mut pos = 0usize;
    let mut speaking = rng.random_bool(0.5);
    while pos < n {
        if speaking {
            let len = (rng.random_range(0.2..0.6) * rate) as usize;
            let knots = rng.random_range(1..=3usize);
            // Knot positions (fractions of the burst) and levels; ends are zero.
            let mut xs: Vec<f64> = (0..knots).map(|_| rng.random_range(0.1..0.9)).collect();
            xs.sort_by(f64::total_cmp);
            let levels: Vec<f64> = (0..knots).map(|_| rng.random_range(0.2..0.9)).collect();
            let mut kx = vec![0.0];
            kx.extend(&xs);
            kx.push(1.0);
            let mut ky = vec![0.0];
            ky.extend(&levels);
            ky.push(0.0);
            for k in 0..len.min(n - pos) {
                let u = k as f64 / len as f64;
                let seg = kx.windows(2).position(|w| u <= w[1]).unwrap_or(kx.len() - 2);
                let span = kx[seg + 1] - kx[seg];
                let w = if span > 0.0 { (u - kx[seg]) / span } else { 0.0 };
                envelope[pos + k] = ky[seg] + (ky[seg + 1] - ky[seg]) * w;
            }
            pos += len;
        } else {
            pos += (rng.random_range(0.1..0.4) * rate) as usize;
        }
        speaking = !speaking;
    }

    let samples = envelope
        .iter()
        .enumerate()
        .map(|(i, &env)| {
            if env == 0.0 {
                return 0.0;
            }
            let t = i as f64 / rate;
            let carrier: f64 = partials
                .iter()
                .map(|&(f, a, ph)| a * (std::f64::consts::TAU * f * t + ph).sin())
                .sum();
            (env * carrier) as f32
        })
        .collect();
    Waveform::new(samples, TARGET_SAMPLE_RATE)
}

/// RMS of the 40 ms centered on frame `i`, scaled by 1/0.7 and clamped to [0, 1].
pub fn aperture_from_audio(w: &Waveform, i: usize) -> f64 {
    let center = (i * SAMPLES_PER_FRAME) as isize;
    (windowed_rms(w.samples(), center, SAMPLES_PER_FRAME / 2) / APERTURE_RMS_SCALE).clamp(0.0, 1.0)
}

/// Apertures for frames `0..n_frames`.
pub fn aperture_series(w: &Waveform, n_frames: usize) -> Vec<f64> {
    (0..n_frames).map(|i| aperture_from_audio(w, i)).collect()
}

/// Per-frame audio energy envelope (unclamped RMS) used as the sync reference.
pub fn rms_envelope(w: &Waveform, n_frames: usize) -> Vec<f64> {
    (0..n_frames)
        .map(|i| windowed_rms(w.samples(), (i * SAMPLES_PER_FRAME) as isize, SAMPLES_PER_FRAME / 2))
        .collect()
}

/// Fixed sprite layout.
#[derive(Debug, Clone, Copy)]
struct Layout {
    size: usize,
    mouth_row: usize,
    mouth_col: usize,
    half_width: f64,
    max_half_open: f64,
}

impl Layout {
    fn new(size: usize) -> Self {
        let s = size as f64;
        Self {
            size,
            mouth_row: (MOUTH_ROW * s).floor() as usize,
            mouth_col: size / 2,
            half_width: 0.5 * MOUTH_WIDTH * s,
            max_half_open: 0.5 * MOUTH_MAX_HEIGHT * s,
        }
    }

    /// Rows searched when measuring the mouth.
    fn mouth_rows(&self) -> std::ops::Range<usize> {
        let reach = self.max_half_open.ceil() as usize + 1;
        self.mouth_row.saturating_sub(reach)..(self.mouth_row + reach + 1).min(self.size)
    }

    /// Reference face pixel in the mouth column, above the mask.
    fn reference_row(&self) -> usize {
        (0.4 * self.size as f64).floor() as usize
    }
}

/// Exact landmarks of the sprite layout at `size × size`.
pub fn sprite_landmarks(size: usize) -> FaceLandmarks {
    let s = size as f64;
    FaceLandmarks {
        nose_tip: Point::new(0.5 * s, 0.5 * s),
        jaw_left: Point::new(0.2 * s, 0.75 * s),
        jaw_right: Point::new(0.8 * s, 0.75 * s),
        chin: Point::new(0.5 * s, 0.85 * s),
        mouth_left: Point::new(0.5 * s - 0.5 * MOUTH_WIDTH * s, MOUTH_ROW * s),
        mouth_right: Point::new(0.5 * s + 0.5 * MOUTH_WIDTH * s, MOUTH_ROW * s),
    }
}

/// Renders the sprite with the given mouth opening.
///
/// The mouth is a one-pixel closed-lip line through the center of row
/// `floor(0.7·size)` widened vertically by an ellipse of half-height
/// `aperture · 0.1 · size`. Coverage is computed per column, so the opening
/// height is recoverable to sub-pixel precision.
pub fn render_frame(id: &SpriteIdentity, aperture: f64, size: usize) -> Result<(Image, FaceLandmarks)> {
    if !(0.0..=1.0).contains(&aperture) {
        return Err(invalid!("aperture must be in [0, 1], got {aperture}"));
    }
    if size < 16 {
        return Err(invalid!("sprite size must be at least 16, got {size}"));
    }
    let layout = Layout::new(size);
    let s = size as f64;
    let mut img = Image::zeros(3, size, size);
    let eye_centers = [(0.33 * s, 0.33 * s), (0.67 * s, 0.33 * s)];
    let eye_radius = 0.06 * s;
    let nostrils = [(0.45 * s, 0.55 * s), (0.55 * s, 0.55 * s)];
    let nostril_radius = 0.025 * s;
    let cx = layout.mouth_col as f64 + 0.5;
    let top = layout.mouth_row as f64;
    let b = aperture * layout.max_half_open;

    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut color = id.skin(x, size);
            let inside = |(ex, ey): (f64, f64), r: f64| (px - ex).powi(2) + (py - ey).powi(2) <= r * r;
            if eye_centers.iter().any(|&c| inside(c, eye_radius)) {
                color = id.eye_color;
            } else if nostrils.iter().any(|&c| inside(c, nostril_radius)) {
                color = id.face_color.map(|c| 0.75 * c);
            }
            let u = (px - cx) / layout.half_width;
            if u.abs() <= 1.0 {
                let open = b * (1.0 - u * u).max(0.0).sqrt();
                let (lo, hi) = (top - open, top + 1.0 + open);
                let cover = ((y as f64 + 1.0).min(hi) - (y as f64).max(lo)).clamp(0.0, 1.0) as f32;
                for c in 0..3 {
                    color[c] = color[c] * (1.0 - cover) + MOUTH_COLOR[c] * cover;
                }
            }
            for c in 0..3 {
                img.set(c, y, x, 2.0 * color[c] - 1.0);
            }
        }
    }
    Ok((img, sprite_landmarks(size)))
}

/// Mouth opening read back from a square sprite frame.
///
/// Each pixel of the mouth column contributes its fractional position
/// between the face color (taken from a reference pixel in the same column)
/// and the mouth color; the closed-lip line is subtracted.
pub fn measure_aperture(img: &Image) -> Result<f64> {
    if img.channels() != 3 || img.height() != img.width() || img.height() < 16 {
        return Err(invalid!("expected a square RGB sprite frame of side >= 16"));
    }
    let layout = Layout::new(img.height());
    let x = layout.mouth_col;
    let unit = |y: usize| -> [f64; 3] { [0, 1, 2].map(|c| (img.get(c, y, x) as f64 + 1.0) / 2.0) };
    let face = unit(layout.reference_row());
    let dir: [f64; 3] = [0, 1, 2].map(|c| face[c] - MOUTH_COLOR[c] as f64);
    let norm2: f64 = dir.iter().map(|d| d * d).sum();
    if norm2 < 1e-6 {
        return Err(invalid!("reference pixel has the mouth color"));
    }
    let covered: f64 = layout
        .mouth_rows()
        .map(|y| {
            let p = unit(y);
            let proj: f64 = (0..3).map(|c| (face[c] - p[c]) * dir[c]).sum::<f64>() / norm2;
            proj.clamp(0.0, 1.0)
        })
        .sum();
    Ok(((covered - 1.0) / (2.0 * layout.max_half_open)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone)]
pub struct SyntheticClip {
    pub identity: SpriteIdentity,
    pub frames: Vec<Image>,
    pub audio: Waveform,
    pub apertures: Vec<f64>,
    pub landmarks: Vec<FaceLandmarks>,
}

impl SyntheticClip {
    pub fn generate(identity: &SpriteIdentity, audio_seed: u64, duration_s: f64, size: usize) -> Result<Self> {
        let audio = synth_audio(audio_seed, duration_s)?;
        Self::from_audio(identity, audio, size)
    }

    /// Renders one frame per 40 ms of `audio`.
    pub fn from_audio(identity: &SpriteIdentity, audio: Waveform, size: usize) -> Result<Self> {
        if audio.sample_rate() != TARGET_SAMPLE_RATE {
            return Err(invalid!("synthetic clips use {TARGET_SAMPLE_RATE} Hz audio"));
        }
        let n_frames = audio.len() / SAMPLES_PER_FRAME;
        if n_frames == 0 {
            return Err(invalid!("audio shorter than one frame"));
        }
        let apertures = aperture_series(&audio, n_frames);
        let mut frames = Vec::with_capacity(n_frames);
        let mut landmarks = Vec::with_capacity(n_frames);
        for &a in &apertures {
            let (img, lm) = render_frame(identity, a, size)?;
            frames.push(img);
            landmarks.push(lm);
        }
        Ok(Self {
            identity: identity.clone(),
            frames,
            audio,
            apertures,
            landmarks,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn into_clip_data(self, identity_name: String, split: Split) -> ClipData {
        ClipData {
            meta: ClipMeta {
                fps: FPS,
                identity: identity_name,
                split,
                num_frames: self.frames.len(),
                seed: Some(self.identity.seed),
            },
            frames: self.frames,
            audio: self.audio,
            landmarks: self.landmarks,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_identities: usize,
    pub clips_per_identity: usize,
    pub duration_s: f64,
    pub image_size: usize,
    pub seed: u64,
    /// Identities (taken from the end) reserved for testing.
    #[serde(default = "default_held_out")]
    pub held_out_identities: usize,
}

fn default_held_out() -> usize {
    1
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities == 0 || self.clips_per_identity == 0 {
            return Err(invalid!("dataset needs at least one identity and one clip"));
        }
        if self.held_out_identities >= self.n_identities && self.n_identities > 1 {
            return Err(invalid!("at least one identity must remain for training"));
        }
        if self.n_identities > (FACE_LEVELS * FACE_LEVELS * FACE_LEVELS) as usize {
            return Err(invalid!("too many identities for distinct face colors"));
        }
        Ok(())
    }

    fn split_of(&self, identity: usize) -> Split {
        if self.n_identities > 1 && identity >= self.n_identities - self.held_out_identities {
            Split::Test
        } else {
            Split::Train
        }
    }
}

/// Identities for a dataset seed, skipping any whose face color repeats.
pub fn dataset_identities(seed: u64, n: usize) -> Vec<SpriteIdentity> {
    let mut used = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut attempt = 0u64;
    while out.len() < n {
        let id = SpriteIdentity::from_seed(crate::rng::derive_seed(seed, domain::IDENTITY, attempt));
        attempt += 1;
        if used.insert(id.face_key()) {
            out.push(id);
        }
    }
    out
}

pub fn clip_dir_name(identity: usize, clip: usize) -> String {
    format!("id{identity:02}_clip{clip:02}")
}

/// Writes the full synthetic dataset and its manifest under `out_dir`.
pub fn make_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    let identities = dataset_identities(spec.seed, spec.n_identities);
    let mut entries = Vec::new();
    for (k, id) in identities.iter().enumerate() {
        let name = format!("id{k:02}");
        let split = spec.split_of(k);
        for c in 0..spec.clips_per_identity {
            let audio_seed = crate::rng::derive_seed(spec.seed, domain::AUDIO, (k * spec.clips_per_identity + c) as u64);
            let clip = SyntheticClip::generate(id, audio_seed, spec.duration_s, spec.image_size)?;
            let dir_name = clip_dir_name(k, c);
            write_clip(&out_dir.join(&dir_name), &clip.into_clip_data(name.clone(), split))?;
            entries.push(ManifestEntry {
                path: dir_name,
                identity: name.clone(),
                split,
            });
        }
    }
    let manifest = Manifest {
        image_size: spec.image_size,
        seed: Some(spec.seed),
        fingerprint: Some(crate::config::fingerprint_json(spec)?),
        mel_stats: None,
        clips: entries,
    };
    write_manifest(out_dir, &manifest)?;
    Ok(manifest)
}
