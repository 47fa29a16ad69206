//! On-disk clip and manifest layout.
//!
//! ```text
//! dataset/
//!   manifest.json
//!   <clip>/frames/000000.png ...
//!   <clip>/audio.wav
//!   <clip>/landmarks.json
//!   <clip>/meta.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audiofeat::{
    align_window, compute_mel, feature_fingerprint, read_feature_file, resample_to_16k, AudioWindow, MelSpectrogram,
    MelStats, Waveform,
};
use crate::error::{Error, Result};
use crate::raster::{BinaryMask, Image};
use crate::videoprep::{compute_mask, crop_align, FaceLandmarks, FrameSequence, KnownLandmarks};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FRAMES_DIR: &str = "frames";
pub const AUDIO_FILE: &str = "audio.wav";
pub const LANDMARKS_FILE: &str = "landmarks.json";
pub const META_FILE: &str = "meta.json";
pub const FEATURES_FILE: &str = "mel.feat";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub fps: f32,
    pub identity: String,
    pub split: Split,
    pub num_frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Clip directory relative to the manifest.
    pub path: String,
    pub identity: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub image_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    /// Training-set log-mel statistics, filled in by preprocessing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mel_stats: Option<MelStats>,
    pub clips: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.clips.iter().filter(move |c| c.split == split)
    }

    pub fn held_out_identities(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.entries(Split::Test).map(|e| e.identity.clone()).collect();
        ids.dedup();
        ids
    }
}

/// A clip in memory: frames, audio, landmarks and metadata.
#[derive(Debug, Clone)]
pub struct ClipData {
    pub frames: Vec<Image>,
    pub audio: Waveform,
    pub landmarks: Vec<FaceLandmarks>,
    pub meta: ClipMeta,
}

impl ClipData {
    pub fn sequence(&self) -> Result<FrameSequence> {
        FrameSequence::new(self.frames.clone(), self.meta.fps)
    }
}

pub fn frame_path(clip_dir: &Path, index: usize) -> PathBuf {
    clip_dir.join(FRAMES_DIR).join(format!("{index:06}.png"))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io("creating directory", path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io("writing", path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io("reading", path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn write_frames(dir: &Path, frames: &[Image]) -> Result<()> {
    create_dir(&dir.join(FRAMES_DIR))?;
    for (i, f) in frames.iter().enumerate() {
        f.save_png(&frame_path(dir, i))?;
    }
    Ok(())
}

/// Loads `frames/%06d.png` in index order; the sequence must be gap-free.
pub fn read_frames(dir: &Path) -> Result<Vec<Image>> {
    let frames_dir = dir.join(FRAMES_DIR);
    let listing = fs::read_dir(&frames_dir).map_err(|e| Error::io("listing", &frames_dir, e))?;
    let mut count = 0;
    for entry in listing {
        let entry = entry.map_err(|e| Error::io("listing", &frames_dir, e))?;
        if entry.path().extension().is_some_and(|e| e == "png") {
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Data(format!("no frames in {}", frames_dir.display())));
    }
    (0..count)
        .map(|i| {
            let p = frame_path(dir, i);
            if !p.exists() {
                return Err(Error::Data(format!("missing frame {}", p.display())));
            }
            Image::load_png(&p)
        })
        .collect()
}

pub fn write_clip(dir: &Path, clip: &ClipData) -> Result<()> {
    if clip.frames.len() != clip.landmarks.len() || clip.frames.len() != clip.meta.num_frames {
        return Err(Error::Data("frame, landmark and metadata counts disagree".into()));
    }
    create_dir(dir)?;
    write_frames(dir, &clip.frames)?;
    clip.audio.write_wav(&dir.join(AUDIO_FILE))?;
    write_json(&dir.join(LANDMARKS_FILE), &clip.landmarks)?;
    write_json(&dir.join(META_FILE), &clip.meta)
}

pub fn read_clip(dir: &Path) -> Result<ClipData> {
    let meta: ClipMeta = read_json(&dir.join(META_FILE))?;
    let frames = read_frames(dir)?;
    let landmarks: Vec<FaceLandmarks> = read_json(&dir.join(LANDMARKS_FILE))?;
    let audio = Waveform::read_wav(&dir.join(AUDIO_FILE))?;
    if frames.len() != meta.num_frames || landmarks.len() != meta.num_frames {
        return Err(Error::Data(format!(
            "{}: meta lists {} frames, found {} frames and {} landmark sets",
            dir.display(),
            meta.num_frames,
            frames.len(),
            landmarks.len()
        )));
    }
    Ok(ClipData {
        frames,
        audio,
        landmarks,
        meta,
    })
}

pub fn write_manifest(root: &Path, manifest: &Manifest) -> Result<()> {
    create_dir(root)?;
    write_json(&root.join(MANIFEST_FILE), manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let m: Manifest = read_json(&root.join(MANIFEST_FILE))?;
    if m.clips.is_empty() {
        return Err(Error::Data(format!("{}: manifest lists no clips", root.display())));
    }
    Ok(m)
}

/// A clip cropped to the model resolution, with per-frame masks and raw
/// (unnormalized) log-mel features.
#[derive(Debug, Clone)]
pub struct PreparedClip {
    pub name: String,
    pub frames: Vec<Image>,
    pub masks: Vec<BinaryMask>,
    pub landmarks: Vec<FaceLandmarks>,
    pub mel: MelSpectrogram,
}

impl PreparedClip {
    /// Crops, masks and featurizes a clip. A cached `mel.feat` next to the
    /// clip is used when its fingerprint matches the current extractor.
    pub fn from_clip(name: &str, clip: &ClipData, image_size: usize, clip_dir: Option<&Path>) -> Result<Self> {
        let seq = clip.sequence()?;
        let aligned = crop_align(&seq, &KnownLandmarks(clip.landmarks.iter().copied().map(Some).collect()), image_size)?;
        let masks = aligned
            .landmarks
            .iter()
            .enumerate()
            .map(|(i, lm)| {
                compute_mask(lm, image_size, image_size)
                    .map(|m| m.rasterize(image_size, image_size))
                    .map_err(|e| match e {
                        Error::UnprocessableFrame { reason, .. } => Error::UnprocessableFrame { frame: i, reason },
                        other => other,
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let cached = clip_dir.map(|d| d.join(FEATURES_FILE)).filter(|p| p.exists());
        let mel = match cached {
            Some(path) => {
                let (header, spec) = read_feature_file(&path)?;
                if header.fingerprint == feature_fingerprint() && header.normalization.is_none() {
                    spec
                } else {
                    compute_mel(&resample_to_16k(&clip.audio)?)?
                }
            }
            None => compute_mel(&resample_to_16k(&clip.audio)?)?,
        };
        Ok(Self {
            name: name.to_string(),
            frames: aligned.frames.into_frames(),
            masks,
            landmarks: aligned.landmarks,
            mel,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    /// Normalized conditioning windows, one per frame.
    pub fn windows(&self, stats: &MelStats) -> Result<Vec<AudioWindow>> {
        let spec = self.mel.normalized(stats)?;
        (0..self.num_frames()).map(|i| align_window(&spec, i, self.num_frames())).collect()
    }
}

/// Loads and prepares every clip of one split.
pub fn load_prepared(root: &Path, manifest: &Manifest, split: Split, image_size: usize) -> Result<Vec<PreparedClip>> {
    manifest
        .entries(split)
        .map(|e| {
            let dir = root.join(&e.path);
            let clip = read_clip(&dir)?;
            PreparedClip::from_clip(&e.path, &clip, image_size, Some(&dir))
        })
        .collect()
}
