//! Face crops, lower-face masks and the stacked conditioning input.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::raster::{BinaryMask, Image};
use crate::schedule::NoiseSchedule;

/// Video rate the audio alignment assumes (two 20 ms spectrogram rows per frame).
pub const FPS: f32 = 25.0;
/// Side of the canonical crop the mask offsets are expressed against.
pub const CANONICAL_CROP: f64 = 128.0;
pub const CROP_SMOOTHING_WINDOW: usize = 7;
pub const CROP_SCALE: f64 = 2.2;
pub const MASK_X_MARGIN: f64 = 0.05;
pub const MASK_NOSE_OFFSET_PX: f64 = 8.0;
pub const MASK_CHIN_MARGIN: f64 = 0.10;
pub const MASK_MIN_TOP: f64 = 0.4;
const MAX_MISSING_FRACTION: f64 = 0.10;

#[derive(Debug, Clone)]
pub struct FrameSequence {
    frames: Vec<Image>,
    fps: f32,
}

impl FrameSequence {
    pub fn new(frames: Vec<Image>, fps: f32) -> Result<Self> {
        let first = frames.first().ok_or_else(|| invalid!("a frame sequence needs at least one frame"))?;
        if first.channels() != 3 {
            return Err(invalid!("frames must be RGB"));
        }
        for (i, f) in frames.iter().enumerate() {
            if f.shape() != first.shape() {
                return Err(invalid!("frame {i} has shape {:?}, expected {:?}", f.shape(), first.shape()));
            }
        }
        Ok(Self { frames, fps })
    }

    pub fn frames(&self) -> &[Image] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Image> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn fps(&self) -> f32 {
        self.fps
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    fn lerp(self, other: Point, w: f64) -> Point {
        Point::new(self.x + (other.x - self.x) * w, self.y + (other.y - self.y) * w)
    }

    fn map(self, f: impl Fn(f64, f64) -> (f64, f64)) -> Point {
        let (x, y) = f(self.x, self.y);
        Point::new(x, y)
    }
}

/// Facial points the mask and crop are derived from, in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceLandmarks {
    pub nose_tip: Point,
    pub jaw_left: Point,
    pub jaw_right: Point,
    pub chin: Point,
    pub mouth_left: Point,
    pub mouth_right: Point,
}

impl FaceLandmarks {
    fn points(&self) -> [Point; 6] {
        [
            self.nose_tip,
            self.jaw_left,
            self.jaw_right,
            self.chin,
            self.mouth_left,
            self.mouth_right,
        ]
    }

    fn map(&self, f: impl Fn(f64, f64) -> (f64, f64) + Copy) -> FaceLandmarks {
        FaceLandmarks {
            nose_tip: self.nose_tip.map(f),
            jaw_left: self.jaw_left.map(f),
            jaw_right: self.jaw_right.map(f),
            chin: self.chin.map(f),
            mouth_left: self.mouth_left.map(f),
            mouth_right: self.mouth_right.map(f),
        }
    }

    fn lerp(&self, other: &FaceLandmarks, w: f64) -> FaceLandmarks {
        FaceLandmarks {
            nose_tip: self.nose_tip.lerp(other.nose_tip, w),
            jaw_left: self.jaw_left.lerp(other.jaw_left, w),
            jaw_right: self.jaw_right.lerp(other.jaw_right, w),
            chin: self.chin.lerp(other.chin, w),
            mouth_left: self.mouth_left.lerp(other.mouth_left, w),
            mouth_right: self.mouth_right.lerp(other.mouth_right, w),
        }
    }

    pub fn centroid(&self) -> Point {
        let pts = self.points();
        let n = pts.len() as f64;
        Point::new(
            pts.iter().map(|p| p.x).sum::<f64>() / n,
            pts.iter().map(|p| p.y).sum::<f64>() / n,
        )
    }

    pub fn mouth_centroid(&self) -> Point {
        self.mouth_left.lerp(self.mouth_right, 0.5)
    }

    pub fn jaw_width(&self) -> f64 {
        let dx = self.jaw_right.x - self.jaw_left.x;
        let dy = self.jaw_right.y - self.jaw_left.y;
        (dx * dx + dy * dy).sqrt()
    }
}

/// Source of per-frame facial landmarks (`None` marks a frame without a detection).
pub trait LandmarkProvider {
    fn landmarks(&self, frame_index: usize, frame: &Image) -> Option<FaceLandmarks>;
}

/// Landmarks known ahead of time, e.g. loaded from `landmarks.json` or
/// emitted by the synthetic renderer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnownLandmarks(pub Vec<Option<FaceLandmarks>>);

impl LandmarkProvider for KnownLandmarks {
    fn landmarks(&self, frame_index: usize, _frame: &Image) -> Option<FaceLandmarks> {
        self.0.get(frame_index).copied().flatten()
    }
}

/// Fills missing detections by linear interpolation (nearest value at the ends).
pub fn fill_missing_landmarks(raw: &[Option<FaceLandmarks>]) -> Result<Vec<FaceLandmarks>> {
    let present: Vec<usize> = (0..raw.len()).filter(|&i| raw[i].is_some()).collect();
    if present.is_empty() {
        return Err(Error::UnprocessableClip("no landmarks detected on any frame".into()));
    }
    let missing = raw.len() - present.len();
    if missing as f64 > MAX_MISSING_FRACTION * raw.len() as f64 {
        return Err(Error::UnprocessableClip(format!(
            "landmarks missing on {missing} of {} frames",
            raw.len()
        )));
    }
    let mut out = Vec::with_capacity(raw.len());
    for i in 0..raw.len() {
        if let Some(lm) = raw[i] {
            out.push(lm);
            continue;
        }
        let before = present.iter().rev().find(|&&p| p < i).copied();
        let after = present.iter().find(|&&p| p > i).copied();
        let lm = match (before, after) {
            (Some(b), Some(a)) => {
                let w = (i - b) as f64 / (a - b) as f64;
                raw[b].unwrap().lerp(&raw[a].unwrap(), w)
            }
            (Some(b), None) => raw[b].unwrap(),
            (None, Some(a)) => raw[a].unwrap(),
            (None, None) => unreachable!("at least one frame has landmarks"),
        };
        out.push(lm);
    }
    Ok(out)
}

/// Centered moving average over `window` samples, truncated at the ends.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Square crop window in source pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
}

#[derive(Debug, Clone)]
pub struct AlignedClip {
    pub frames: FrameSequence,
    pub crops: Vec<CropBox>,
    /// Landmarks re-expressed in crop pixel coordinates.
    pub landmarks: Vec<FaceLandmarks>,
    /// Smoothed (pre-clamping) crop centers in source coordinates.
    pub centers: Vec<Point>,
}

/// Square face crops resized to `out_size × out_size`.
///
/// Each crop is centered on the landmark centroid with side 2.2× the jaw
/// width, both smoothed over a 7-frame moving window, then clamped to lie
/// inside the frame.
pub fn crop_align(seq: &FrameSequence, provider: &dyn LandmarkProvider, out_size: usize) -> Result<AlignedClip> {
    if out_size == 0 {
        return Err(invalid!("crop size must be positive"));
    }
    let raw: Vec<Option<FaceLandmarks>> = seq
        .frames()
        .iter()
        .enumerate()
        .map(|(i, f)| provider.landmarks(i, f))
        .collect();
    let lms = fill_missing_landmarks(&raw)?;
    let cx: Vec<f64> = lms.iter().map(|l| l.centroid().x).collect();
    let cy: Vec<f64> = lms.iter().map(|l| l.centroid().y).collect();
    let sides: Vec<f64> = lms.iter().map(|l| CROP_SCALE * l.jaw_width()).collect();
    let cx = moving_average(&cx, CROP_SMOOTHING_WINDOW);
    let cy = moving_average(&cy, CROP_SMOOTHING_WINDOW);
    let sides = moving_average(&sides, CROP_SMOOTHING_WINDOW);
    let (h, w) = (seq.height() as f64, seq.width() as f64);

    let mut frames = Vec::with_capacity(seq.len());
    let mut crops = Vec::with_capacity(seq.len());
    let mut landmarks = Vec::with_capacity(seq.len());
    let mut centers = Vec::with_capacity(seq.len());
    for (i, frame) in seq.frames().iter().enumerate() {
        let side = sides[i].min(h).min(w);
        if side <= 0.0 {
            return Err(Error::UnprocessableFrame {
                frame: i,
                reason: "degenerate face size".into(),
            });
        }
        let x0 = (cx[i] - side / 2.0).clamp(0.0, w - side);
        let y0 = (cy[i] - side / 2.0).clamp(0.0, h - side);
        let crop = CropBox { x0, y0, side };
        frames.push(frame.resample_box(x0, y0, side, side, out_size, out_size));
        let scale = out_size as f64 / side;
        landmarks.push(lms[i].map(move |x, y| ((x - x0) * scale, (y - y0) * scale)));
        crops.push(crop);
        centers.push(Point::new(cx[i], cy[i]));
    }
    Ok(AlignedClip {
        frames: FrameSequence::new(frames, seq.fps())?,
        crops,
        landmarks,
        centers,
    })
}

/// Axis-aligned rectangle in normalized crop coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl MaskSpec {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(in_unit(x0) && in_unit(x1) && in_unit(y0) && in_unit(y1)) {
            return Err(invalid!("mask coordinates must lie in [0, 1]"));
        }
        if !(x0 < x1 && y0 < y1) {
            return Err(invalid!("mask rectangle is empty"));
        }
        if y0 < MASK_MIN_TOP {
            return Err(invalid!("mask must lie in the lower face (y0 = {y0:.3} < {MASK_MIN_TOP})"));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    /// The whole frame; only for reductions in tests and full-frame edits.
    pub fn full_frame() -> Self {
        Self {
            x0: 0.0,
            y0: 0.0,
            x1: 1.0,
            y1: 1.0,
        }
    }

    pub fn contains(&self, p: Point, width: usize, height: usize) -> bool {
        let (nx, ny) = (p.x / width as f64, p.y / height as f64);
        nx >= self.x0 && nx <= self.x1 && ny >= self.y0 && ny <= self.y1
    }

    /// Pixels whose centers fall inside the rectangle.
    pub fn rasterize(&self, height: usize, width: usize) -> BinaryMask {
        let mut m = BinaryMask::full(height, width, false);
        for y in 0..height {
            let ny = (y as f64 + 0.5) / height as f64;
            if ny < self.y0 || ny > self.y1 {
                continue;
            }
            for x in 0..width {
                let nx = (x as f64 + 0.5) / width as f64;
                if nx >= self.x0 && nx <= self.x1 {
                    m.set(y, x, true);
                }
            }
        }
        m
    }
}

/// Lower-face rectangle from one frame's landmarks (crop pixel coordinates).
///
/// Horizontally it spans the jaw extremes with a 5 % margin; vertically it
/// runs from 8 px (at the 128 px canonical crop) below the nose tip to 10 %
/// of the crop height below the chin.
pub fn compute_mask(lm: &FaceLandmarks, crop_width: usize, crop_height: usize) -> Result<MaskSpec> {
    let (w, h) = (crop_width as f64, crop_height as f64);
    let jaw_lo = lm.jaw_left.x.min(lm.jaw_right.x);
    let jaw_hi = lm.jaw_left.x.max(lm.jaw_right.x);
    if jaw_hi - jaw_lo <= 0.0 {
        return Err(Error::UnprocessableFrame {
            frame: 0,
            reason: "zero jaw width".into(),
        });
    }
    let x0 = (jaw_lo / w - MASK_X_MARGIN).clamp(0.0, 1.0);
    let x1 = (jaw_hi / w + MASK_X_MARGIN).clamp(0.0, 1.0);
    let y0 = (lm.nose_tip.y / h + MASK_NOSE_OFFSET_PX / CANONICAL_CROP).clamp(0.0, 1.0);
    let y1 = (lm.chin.y / h + MASK_CHIN_MARGIN).clamp(0.0, 1.0);
    MaskSpec::new(x0, y0, x1, y1).map_err(|e| Error::UnprocessableFrame {
        frame: 0,
        reason: e.to_string(),
    })
}

/// Noises only the masked pixels; everything outside is copied bit-exactly.
pub fn apply_forward_noise(
    frame: &Image,
    mask: &BinaryMask,
    t: usize,
    eps: &Image,
    schedule: &NoiseSchedule,
) -> Result<Image> {
    frame.ensure_same_shape(eps, "apply_forward_noise")?;
    mask.check_matches(frame)?;
    let (signal, noise) = {
        schedule.alpha_bar(t)?;
        schedule.q_coefficients(t)
    };
    let mut out = frame.clone();
    let (c, h, w) = frame.shape();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if mask.is_set(y, x) {
                    let i = frame.index(ch, y, x);
                    out.data_mut()[i] = (signal * frame.data()[i] as f64 + noise * eps.data()[i] as f64) as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Channel-stacked network input: `[noisy_masked(3), previous(3), identity(3), mask(0|1)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningInput {
    stack: Image,
}

impl ConditioningInput {
    pub fn channels(&self) -> usize {
        self.stack.channels()
    }

    pub fn stack(&self) -> &Image {
        &self.stack
    }

    pub fn has_mask_channel(&self) -> bool {
        self.stack.channels() == 10
    }

    pub fn into_stack(self) -> Image {
        self.stack
    }
}

pub fn assemble_input(
    noisy_masked: &Image,
    previous: &Image,
    identity: &Image,
    mask: &BinaryMask,
    include_mask_channel: bool,
) -> Result<ConditioningInput> {
    for (img, name) in [(noisy_masked, "noisy"), (previous, "previous"), (identity, "identity")] {
        if img.channels() != 3 {
            return Err(invalid!("{name} frame must have 3 channels, got {}", img.channels()));
        }
    }
    noisy_masked.ensure_same_shape(previous, "assemble_input (previous)")?;
    noisy_masked.ensure_same_shape(identity, "assemble_input (identity)")?;
    mask.check_matches(noisy_masked)?;
    let (h, w) = (noisy_masked.height(), noisy_masked.width());
    let channels = if include_mask_channel { 10 } else { 9 };
    let mut data = Vec::with_capacity(channels * h * w);
    data.extend_from_slice(noisy_masked.data());
    data.extend_from_slice(previous.data());
    data.extend_from_slice(identity.data());
    if include_mask_channel {
        data.extend(mask.to_f32());
    }
    Ok(ConditioningInput {
        stack: Image::new(channels, h, w, data)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_linear_schedule;

    fn lm(nose_y: f64, chin_y: f64, jaw: (f64, f64), size: f64) -> FaceLandmarks {
        FaceLandmarks {
            nose_tip: Point::new(0.5 * size, nose_y * size),
            jaw_left: Point::new(jaw.0 * size, 0.75 * size),
            jaw_right: Point::new(jaw.1 * size, 0.75 * size),
            chin: Point::new(0.5 * size, chin_y * size),
            mouth_left: Point::new(0.35 * size, 0.7 * size),
            mouth_right: Point::new(0.65 * size, 0.7 * size),
        }
    }

    #[test]
    fn mask_arithmetic() {
        let m = compute_mask(&lm(0.5, 0.85, (0.2, 0.8), 128.0), 128, 128).unwrap();
        assert!((m.y0 - (0.5 + 8.0 / 128.0)).abs() < 1e-12);
        assert!((m.y1 - 0.95).abs() < 1e-12);
        assert!((m.x0 - 0.15).abs() < 1e-12);
        assert!((m.x1 - 0.85).abs() < 1e-12);
        // mouth centroid inside
        let l = lm(0.5, 0.85, (0.2, 0.8), 128.0);
        assert!(m.contains(l.mouth_centroid(), 128, 128));
    }

    #[test]
    fn degenerate_jaw_rejected() {
        assert!(matches!(
            compute_mask(&lm(0.5, 0.85, (0.5, 0.5), 64.0), 64, 64),
            Err(Error::UnprocessableFrame { .. })
        ));
    }

    #[test]
    fn mask_spec_invariants() {
        assert!(MaskSpec::new(0.2, 0.3, 0.8, 0.9).is_err());
        assert!(MaskSpec::new(0.8, 0.5, 0.2, 0.9).is_err());
        assert!(MaskSpec::new(0.2, 0.5, 0.8, 1.2).is_err());
        assert!(MaskSpec::new(0.2, 0.5, 0.8, 0.9).is_ok());
    }

    #[test]
    fn smoothing_of_linear_ramp() {
        // centroid drifts 10 px over 20 frames
        let raw: Vec<f64> = (0..20).map(|i| 50.0 + 10.0 * i as f64 / 19.0).collect();
        let smooth = moving_average(&raw, 7);
        // oracle: explicit truncated 7-tap mean
        for i in 0..20usize {
            let lo = i.saturating_sub(3);
            let hi = (i + 4).min(20);
            let expect: f64 = raw[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
            assert!((smooth[i] - expect).abs() < 1e-12);
            assert!((smooth[i] - raw[i]).abs() <= 3.0);
        }
        assert_eq!(moving_average(&[4.0], 7), vec![4.0]);
    }

    #[test]
    fn translating_face_crop_follows_smoothed_center() {
        let size = 96usize;
        let n = 20;
        let frames = (0..n).map(|_| Image::zeros(3, size, size)).collect();
        let seq = FrameSequence::new(frames, FPS).unwrap();
        let lms = KnownLandmarks(
            (0..n)
                .map(|i| {
                    let dx = 10.0 * i as f64 / (n - 1) as f64;
                    Some(lm(0.5, 0.85, (0.4, 0.6), size as f64).map(|x, y| (x + dx - 10.0, y)))
                })
                .collect(),
        );
        let clip = crop_align(&seq, &lms, 32).unwrap();
        for (i, c) in clip.centers.iter().enumerate() {
            let raw = lms.0[i].unwrap().centroid();
            assert!((c.x - raw.x).abs() <= 3.0);
        }
    }

    #[test]
    fn missing_landmarks() {
        let a = lm(0.5, 0.85, (0.2, 0.8), 100.0);
        let b = a.map(|x, y| (x + 10.0, y));
        let mut raw = vec![Some(a); 20];
        raw[19] = Some(b);
        raw[18] = None;
        let filled = fill_missing_landmarks(&raw).unwrap();
        assert!((filled[18].nose_tip.x - (a.nose_tip.x + 5.0)).abs() < 1e-12);
        raw[5] = None;
        raw[6] = None;
        assert!(fill_missing_landmarks(&raw).is_err());
        assert!(fill_missing_landmarks(&[None, None]).is_err());
    }

    #[test]
    fn forward_noise_respects_mask() {
        let s = make_linear_schedule(100, 1e-4, 0.02).unwrap();
        let frame = Image::new(3, 4, 4, (0..48).map(|i| (i as f32 / 48.0) - 0.5).collect()).unwrap();
        let eps = Image::filled(3, 4, 4, 0.7);
        let mask = MaskSpec::new(0.0, 0.5, 1.0, 1.0).unwrap().rasterize(4, 4);
        let out = apply_forward_noise(&frame, &mask, 50, &eps, &s).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    if mask.is_set(y, x) {
                        let expect = s.q_sample(&[frame.get(c, y, x)], 50, &[0.7]).unwrap()[0];
                        assert_eq!(out.get(c, y, x), expect);
                    } else {
                        assert_eq!(out.get(c, y, x).to_bits(), frame.get(c, y, x).to_bits());
                    }
                }
            }
        }
        let full = MaskSpec::full_frame().rasterize(4, 4);
        let whole = apply_forward_noise(&frame, &full, 50, &eps, &s).unwrap();
        assert_eq!(whole.data(), &s.q_sample(frame.data(), 50, eps.data()).unwrap()[..]);
    }

    #[test]
    fn input_stacking() {
        let z = Image::zeros(3, 8, 8);
        let mask = MaskSpec::new(0.25, 0.5, 0.75, 1.0).unwrap().rasterize(8, 8);
        let nine = assemble_input(&z, &z, &z, &mask, false).unwrap();
        assert_eq!(nine.channels(), 9);
        assert!(nine.stack().data().iter().all(|&v| v == 0.0));
        let ten = assemble_input(&z, &z, &z, &mask, true).unwrap();
        assert_eq!(ten.channels(), 10);
        assert_eq!(ten.stack().data()[..9 * 64].iter().filter(|&&v| v != 0.0).count(), 0);
        assert_eq!(ten.stack().data()[9 * 64..].iter().filter(|&&v| v == 1.0).count(), mask.count());
        let a = Image::filled(3, 8, 8, 0.1);
        let b = Image::filled(3, 8, 8, 0.2);
        let c = Image::filled(3, 8, 8, 0.3);
        let s = assemble_input(&a, &b, &c, &mask, false).unwrap();
        assert_eq!(s.stack().get(0, 0, 0), 0.1);
        assert_eq!(s.stack().get(3, 0, 0), 0.2);
        assert_eq!(s.stack().get(8, 0, 0), 0.3);
        assert!(assemble_input(&a, &Image::zeros(3, 4, 4), &c, &mask, false).is_err());
    }
}
