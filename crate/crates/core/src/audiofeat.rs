//! Speech waveform to aligned log-mel conditioning windows.
//!
//! Features are computed at 16 kHz with a 2048-point FFT, a 640-sample Hann
//! window, a 320-sample hop and 256 HTK mel bands, giving 50 rows per second
//! of audio: two rows per 25 fps video frame.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const TARGET_SAMPLE_RATE: u32 = 16_000;
pub const N_FFT: usize = 2048;
pub const WIN_LENGTH: usize = 640;
pub const HOP_LENGTH: usize = 320;
pub const N_MELS: usize = 256;
pub const MEL_FMAX: f64 = 8000.0;
pub const LOG_FLOOR: f32 = 1e-5;
/// Rows of the spectrogram in one conditioning window (`2i-2 ..= 2i+2`).
pub const WINDOW_ROWS: usize = 5;
/// Spectrogram rows per video frame.
pub const ROWS_PER_FRAME: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(invalid!("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(invalid!("waveform contains non-finite samples"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn scaled(&self, gain: f32) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn reversed(&self) -> Waveform {
        let mut samples = self.samples.clone();
        samples.reverse();
        Waveform {
            samples,
            sample_rate: self.sample_rate,
        }
    }

    pub fn truncated(&self, len: usize) -> Waveform {
        Waveform {
            samples: self.samples[..len.min(self.samples.len())].to_vec(),
            sample_rate: self.sample_rate,
        }
    }

    /// Reads a WAV file, downmixing multichannel audio by averaging.
    pub fn read_wav(path: &Path) -> Result<Waveform> {
        let wav_err = |source| Error::Wav {
            path: path.to_path_buf(),
            source,
        };
        let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
        let spec = reader.spec();
        let channels = spec.channels.max(1) as usize;
        let interleaved: Vec<f32> = match spec.sample_format {
            hound::SampleFormat::Float => reader.samples::<f32>().collect::<std::result::Result<_, _>>().map_err(wav_err)?,
            hound::SampleFormat::Int => {
                let scale = 1.0 / (1i64 << (spec.bits_per_sample - 1)) as f32;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f32 * scale))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(wav_err)?
            }
        };
        let samples = interleaved
            .chunks(channels)
            .map(|frame| frame.iter().sum::<f32>() / frame.len() as f32)
            .collect();
        Waveform::new(samples, spec.sample_rate)
    }

    /// Writes mono 16-bit PCM.
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let wav_err = |source| Error::Wav {
            path: path.to_path_buf(),
            source,
        };
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
        for &s in &self.samples {
            let v = (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
            writer.write_sample(v).map_err(wav_err)?;
        }
        writer.finalize().map_err(wav_err)
    }
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

const RESAMPLE_ZERO_CROSSINGS: f64 = 16.0;
const RESAMPLE_KAISER_BETA: f64 = 8.6;
const RESAMPLE_ROLLOFF: f64 = 0.945;

/// Band-limited (Kaiser-windowed sinc) resampling to 16 kHz.
pub fn resample_to_16k(w: &Waveform) -> Result<Waveform> {
    resample(w, TARGET_SAMPLE_RATE)
}

pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if w.is_empty() {
        return Err(invalid!("cannot resample an empty waveform"));
    }
    if w.sample_rate == target_rate {
        return Ok(w.clone());
    }
    let ratio = target_rate as f64 / w.sample_rate as f64;
    let out_len = (w.len() as f64 * ratio).round().max(1.0) as usize;
    // cutoff relative to the input Nyquist
    let cutoff = ratio.min(1.0) * RESAMPLE_ROLLOFF;
    let half_width = RESAMPLE_ZERO_CROSSINGS / cutoff;
    let i0_beta = bessel_i0(RESAMPLE_KAISER_BETA);
    let x = &w.samples;
    let samples = (0..out_len)
        .map(|n| {
            let t = n as f64 / ratio;
            let lo = (t - half_width).ceil().max(0.0) as usize;
            let hi = ((t + half_width).floor() as usize).min(x.len() - 1);
            let mut acc = 0.0;
            for (k, &xk) in x.iter().enumerate().take(hi + 1).skip(lo) {
                let d = t - k as f64;
                let arg = cutoff * d;
                let sinc = if arg.abs() < 1e-12 {
                    1.0
                } else {
                    (std::f64::consts::PI * arg).sin() / (std::f64::consts::PI * arg)
                };
                let r = d / half_width;
                let win = bessel_i0(RESAMPLE_KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / i0_beta;
                acc += xk as f64 * cutoff * sinc * win;
            }
            acc as f32
        })
        .collect();
    Waveform::new(samples, target_rate)
}

/// Log-mel feature matrix, `n_rows × 256`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    rows: usize,
    values: Vec<f32>,
    silence_frame: Vec<f32>,
}

impl MelSpectrogram {
    pub fn from_rows(rows: usize, values: Vec<f32>, silence_frame: Vec<f32>) -> Result<Self> {
        if rows == 0 {
            return Err(invalid!("a spectrogram needs at least one row"));
        }
        if values.len() != rows * N_MELS || silence_frame.len() != N_MELS {
            return Err(invalid!("spectrogram buffers must have {N_MELS} bands per row"));
        }
        Ok(Self {
            rows,
            values,
            silence_frame,
        })
    }

    pub fn num_rows(&self) -> usize {
        self.rows
    }

    pub fn num_bands(&self) -> usize {
        N_MELS
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.values[r * N_MELS..(r + 1) * N_MELS]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn silence_frame(&self) -> &[f32] {
        &self.silence_frame
    }

    pub fn hop_seconds(&self) -> f64 {
        HOP_LENGTH as f64 / TARGET_SAMPLE_RATE as f64
    }

    pub fn window_seconds(&self) -> f64 {
        WIN_LENGTH as f64 / TARGET_SAMPLE_RATE as f64
    }

    /// Applies per-band z-normalization to every row and to the silence frame.
    pub fn normalized(&self, stats: &MelStats) -> Result<MelSpectrogram> {
        stats.validate()?;
        let norm = |row: &[f32]| -> Vec<f32> {
            row.iter()
                .zip(stats.mean.iter().zip(&stats.std))
                .map(|(&v, (&m, &s))| (v - m) / s)
                .collect()
        };
        let mut values = Vec::with_capacity(self.values.len());
        for r in 0..self.rows {
            values.extend(norm(self.row(r)));
        }
        Ok(MelSpectrogram {
            rows: self.rows,
            values,
            silence_frame: norm(&self.silence_frame),
        })
    }
}

/// Per-band mean / standard deviation computed on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl MelStats {
    pub fn identity() -> Self {
        Self {
            mean: vec![0.0; N_MELS],
            std: vec![1.0; N_MELS],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != N_MELS || self.std.len() != N_MELS {
            return Err(invalid!("mel statistics must have {N_MELS} bands"));
        }
        if self.std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(invalid!("mel standard deviations must be positive and finite"));
        }
        Ok(())
    }

    /// Accumulates band statistics over all rows of `specs`.
    ///
    /// Bands with (near-)zero variance get unit std so normalization stays finite.
    pub fn from_spectrograms<'a>(specs: impl IntoIterator<Item = &'a MelSpectrogram>) -> Result<Self> {
        let mut sum = vec![0.0f64; N_MELS];
        let mut sq = vec![0.0f64; N_MELS];
        let mut n = 0usize;
        for spec in specs {
            for r in 0..spec.num_rows() {
                for (b, &v) in spec.row(r).iter().enumerate() {
                    sum[b] += v as f64;
                    sq[b] += (v as f64) * (v as f64);
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(invalid!("no spectrogram rows to compute statistics from"));
        }
        let nf = n as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / nf) as f32).collect();
        let std = sum
            .iter()
            .zip(&sq)
            .map(|(s, q)| {
                let m = s / nf;
                let var = (q / nf - m * m).max(0.0);
                let sd = var.sqrt();
                if sd < 1e-6 {
                    1.0
                } else {
                    sd as f32
                }
            })
            .collect();
        Ok(Self { mean, std })
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the 256 HTK mel bands over 0..8 kHz.
pub fn mel_center_frequencies() -> Vec<f64> {
    let edges = mel_band_edges();
    edges[1..=N_MELS].to_vec()
}

fn mel_band_edges() -> Vec<f64> {
    let top = hz_to_mel(MEL_FMAX);
    (0..N_MELS + 2)
        .map(|i| mel_to_hz(top * i as f64 / (N_MELS + 1) as f64))
        .collect()
}

/// Triangular HTK filterbank, `256 × (N_FFT/2 + 1)`, peak weight 1.
pub struct MelFilterbank {
    weights: Vec<Vec<(usize, f32)>>,
}

impl MelFilterbank {
    pub fn new() -> Self {
        let edges = mel_band_edges();
        let n_bins = N_FFT / 2 + 1;
        let bin_hz = TARGET_SAMPLE_RATE as f64 / N_FFT as f64;
        let weights = (0..N_MELS)
            .map(|m| {
                let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..n_bins)
                    .filter_map(|k| {
                        let f = k as f64 * bin_hz;
                        let w = if f > lo && f <= center {
                            (f - lo) / (center - lo)
                        } else if f > center && f < hi {
                            (hi - f) / (hi - center)
                        } else {
                            0.0
                        };
                        (w > 0.0).then_some((k, w as f32))
                    })
                    .collect()
            })
            .collect();
        Self { weights }
    }

    pub fn apply(&self, power: &[f32], out: &mut [f32]) {
        for (o, band) in out.iter_mut().zip(&self.weights) {
            *o = band.iter().map(|&(k, w)| w * power[k]).sum();
        }
    }
}

impl Default for MelFilterbank {
    fn default() -> Self {
        Self::new()
    }
}

/// Index into `0..len` with mirror reflection at both ends (no edge repeat).
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

/// Streaming log-mel extractor; reuse one instance across clips.
pub struct MelExtractor {
    fft: Arc<dyn Fft<f32>>,
    window: Vec<f32>,
    filterbank: MelFilterbank,
}

impl MelExtractor {
    pub fn new() -> Self {
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(N_FFT);
        // periodic Hann
        let window = (0..WIN_LENGTH)
            .map(|n| {
                let x = 2.0 * std::f64::consts::PI * n as f64 / WIN_LENGTH as f64;
                (0.5 - 0.5 * x.cos()) as f32
            })
            .collect();
        Self {
            fft,
            window,
            filterbank: MelFilterbank::new(),
        }
    }

    /// Log-mel spectrogram with `ceil(len / 320)` rows; row `j` is centered
    /// on sample `320·j` (reflect padding at the edges).
    pub fn compute(&self, w: &Waveform) -> Result<MelSpectrogram> {
        if w.sample_rate() != TARGET_SAMPLE_RATE {
            return Err(invalid!(
                "mel features need {TARGET_SAMPLE_RATE} Hz audio, got {} Hz",
                w.sample_rate()
            ));
        }
        if w.is_empty() {
            return Err(invalid!("cannot compute features of an empty waveform"));
        }
        let x = w.samples();
        let rows = x.len().div_ceil(HOP_LENGTH);
        let pad = (N_FFT - WIN_LENGTH) / 2;
        let mut buf = vec![Complex::new(0.0f32, 0.0); N_FFT];
        let mut power = vec![0.0f32; N_FFT / 2 + 1];
        let mut values = vec![0.0f32; rows * N_MELS];
        for r in 0..rows {
            let start = (r * HOP_LENGTH) as isize - (WIN_LENGTH / 2) as isize;
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (n, &wn) in self.window.iter().enumerate() {
                let s = x[reflect_index(start + n as isize, x.len())];
                buf[pad + n] = Complex::new(s * wn, 0.0);
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            let out = &mut values[r * N_MELS..(r + 1) * N_MELS];
            self.filterbank.apply(&power, out);
            for v in out.iter_mut() {
                *v = v.max(LOG_FLOOR).ln();
            }
        }
        MelSpectrogram::from_rows(rows, values, silence_frame())
    }
}

impl Default for MelExtractor {
    fn default() -> Self {
        Self::new()
    }
}

/// Log-mel of an all-zero signal: every band at the log floor.
pub fn silence_frame() -> Vec<f32> {
    vec![LOG_FLOOR.ln(); N_MELS]
}

pub fn compute_mel(w: &Waveform) -> Result<MelSpectrogram> {
    MelExtractor::new().compute(w)
}

/// The `[5, 256]` slice of spectrogram rows `2i-2 ..= 2i+2` conditioning frame `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioWindow {
    values: Vec<f32>,
    center_frame_index: usize,
}

impl AudioWindow {
    pub fn new(values: Vec<f32>, center_frame_index: usize) -> Result<Self> {
        if values.len() != WINDOW_ROWS * N_MELS {
            return Err(invalid!(
                "audio window must be [{WINDOW_ROWS}, {N_MELS}], got {} values",
                values.len()
            ));
        }
        Ok(Self {
            values,
            center_frame_index,
        })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        (WINDOW_ROWS, N_MELS)
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.values[r * N_MELS..(r + 1) * N_MELS]
    }

    pub fn center_frame_index(&self) -> usize {
        self.center_frame_index
    }
}

/// Extracts the conditioning window of video frame `i`.
///
/// Rows before the start or past `min(rows, 2·n_frames)` are replaced by the
/// spectrogram's silence frame.
pub fn align_window(spec: &MelSpectrogram, i: usize, n_frames: usize) -> Result<AudioWindow> {
    if i >= n_frames {
        return Err(invalid!("frame index {i} out of range for {n_frames} frames"));
    }
    let usable = spec.num_rows().min(ROWS_PER_FRAME * n_frames) as isize;
    let center = (ROWS_PER_FRAME * i) as isize;
    let mut values = Vec::with_capacity(WINDOW_ROWS * N_MELS);
    for k in -2isize..=2 {
        let r = center + k;
        if r < 0 || r >= usable {
            values.extend_from_slice(spec.silence_frame());
        } else {
            values.extend_from_slice(spec.row(r as usize));
        }
    }
    AudioWindow::new(values, i)
}

/// Header of a cached feature file. The file is this JSON on one line,
/// a `\n`, then `shape[0] * shape[1]` little-endian `f32` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureHeader {
    pub shape: [usize; 2],
    pub dtype: String,
    pub normalization: Option<MelStats>,
    pub fingerprint: String,
}

/// Fingerprint of the feature-extraction parameters.
pub fn feature_fingerprint() -> String {
    crate::config::fingerprint_str(&format!(
        "mel:sr={TARGET_SAMPLE_RATE},nfft={N_FFT},win={WIN_LENGTH},hop={HOP_LENGTH},mels={N_MELS},fmax={MEL_FMAX},floor={LOG_FLOOR},htk,center=reflect"
    ))
}

/// Writes the raw (un-normalized) spectrogram plus the stats to apply at load.
pub fn write_feature_file(path: &Path, spec: &MelSpectrogram, normalization: Option<&MelStats>) -> Result<()> {
    let header = FeatureHeader {
        shape: [spec.num_rows(), N_MELS],
        dtype: "f32le".into(),
        normalization: normalization.cloned(),
        fingerprint: feature_fingerprint(),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    bytes.reserve(spec.values().len() * 4);
    for v in spec.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io("creating feature file", path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io("writing feature file", path, e))
}

pub fn read_feature_file(path: &Path) -> Result<(FeatureHeader, MelSpectrogram)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io("opening feature file", path, e))?;
    let mut reader = BufReader::new(f);
    let mut line = Vec::new();
    reader
        .read_until(b'\n', &mut line)
        .map_err(|e| Error::io("reading feature header", path, e))?;
    let header: FeatureHeader = serde_json::from_slice(&line)?;
    if header.dtype != "f32le" || header.shape[1] != N_MELS {
        return Err(Error::Data(format!("{}: unsupported feature layout", path.display())));
    }
    if header.fingerprint != feature_fingerprint() {
        return Err(Error::Data(format!(
            "{}: features were computed with different parameters",
            path.display()
        )));
    }
    let mut raw = Vec::new();
    reader
        .read_to_end(&mut raw)
        .map_err(|e| Error::io("reading feature data", path, e))?;
    let expected = header.shape[0] * header.shape[1] * 4;
    if raw.len() != expected {
        return Err(Error::Data(format!(
            "{}: expected {expected} bytes of features, found {}",
            path.display(),
            raw.len()
        )));
    }
    let values = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let spec = MelSpectrogram::from_rows(header.shape[0], values, silence_frame())?;
    Ok((header, spec))
}

/// RMS of `samples[center - half .. center + half]`, zero-padded outside.
pub fn windowed_rms(samples: &[f32], center: isize, half: usize) -> f64 {
    let width = 2 * half;
    let mut acc = 0.0f64;
    for k in 0..width {
        let idx = center - half as isize + k as isize;
        if idx >= 0 && (idx as usize) < samples.len() {
            let v = samples[idx as usize] as f64;
            acc += v * v;
        }
    }
    (acc / width as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, amp: f32, rate: u32, secs: f64) -> Waveform {
        let n = (rate as f64 * secs).round() as usize;
        let s = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin() as f32)
            .collect();
        Waveform::new(s, rate).unwrap()
    }

    fn peak_bin(x: &[f32]) -> usize {
        let n = x.len();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n);
        let mut buf: Vec<Complex<f32>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft.process(&mut buf);
        (1..n / 2)
            .max_by(|&a, &b| buf[a].norm().partial_cmp(&buf[b].norm()).unwrap())
            .unwrap()
    }

    #[test]
    fn resample_identity_and_length() {
        let w = sine(440.0, 0.5, 16_000, 0.25);
        assert_eq!(resample_to_16k(&w).unwrap(), w);
        let w48 = sine(440.0, 0.5, 48_000, 1.0);
        let out = resample_to_16k(&w48).unwrap();
        assert_eq!(out.sample_rate(), 16_000);
        assert!((out.len() as i64 - 16_000).abs() <= 1);
        assert!(resample_to_16k(&Waveform::new(vec![], 8000).unwrap()).is_err());
    }

    #[test]
    fn resample_preserves_tone_frequency() {
        let w8 = sine(1000.0, 0.8, 8_000, 1.0);
        // 1 Hz bins for a 1 s signal at either rate
        assert_eq!(peak_bin(w8.samples()), 1000);
        let out = resample_to_16k(&w8).unwrap();
        let bin = peak_bin(out.samples()) as i64;
        assert!((bin - 1000).abs() <= 1, "peak at {bin}");
    }

    #[test]
    fn one_second_gives_fifty_rows() {
        let w = sine(440.0, 1.0, 16_000, 1.0);
        let spec = compute_mel(&w).unwrap();
        assert_eq!((spec.num_rows(), spec.num_bands()), (50, 256));
    }

    #[test]
    fn zero_signal_is_silence() {
        let w = Waveform::new(vec![0.0; 16_000], 16_000).unwrap();
        let spec = compute_mel(&w).unwrap();
        for r in 0..spec.num_rows() {
            assert_eq!(spec.row(r), spec.silence_frame());
        }
    }

    #[test]
    fn wrong_rate_rejected() {
        let w = sine(440.0, 1.0, 8_000, 0.1);
        assert!(compute_mel(&w).is_err());
    }

    #[test]
    fn sine_peaks_in_matching_band() {
        let w = sine(440.0, 1.0, 16_000, 1.0);
        let spec = compute_mel(&w).unwrap();
        let centers = mel_center_frequencies();
        let expected = centers
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 440.0).abs().partial_cmp(&(b.1 - 440.0).abs()).unwrap())
            .unwrap()
            .0 as i64;
        for r in 1..spec.num_rows() - 1 {
            let row = spec.row(r);
            let arg = (0..N_MELS).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap() as i64;
            assert!((arg - expected).abs() <= 1, "row {r}: band {arg}, expected {expected}");
        }
    }

    #[test]
    fn windows_pad_with_silence() {
        let w = sine(300.0, 0.5, 16_000, 0.4); // 10 frames, 20 rows
        let spec = compute_mel(&w).unwrap();
        assert_eq!(spec.num_rows(), 20);
        let first = align_window(&spec, 0, 10).unwrap();
        assert_eq!(first.row(0), spec.silence_frame());
        assert_eq!(first.row(1), spec.silence_frame());
        assert_eq!(first.row(2), spec.row(0));
        assert_eq!(first.row(4), spec.row(2));
        let last = align_window(&spec, 9, 10).unwrap();
        assert_eq!(last.row(0), spec.row(16));
        assert_eq!(last.row(3), spec.row(19));
        assert_eq!(last.row(4), spec.silence_frame());
        // fewer frames than rows: excess rows are ignored
        let short = align_window(&spec, 4, 5).unwrap();
        assert_eq!(short.row(3), spec.row(9));
        assert_eq!(short.row(4), spec.silence_frame());
        assert!(align_window(&spec, 10, 10).is_err());
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mel.bin");
        let spec = compute_mel(&sine(200.0, 0.3, 16_000, 0.3)).unwrap();
        let stats = MelStats::from_spectrograms([&spec]).unwrap();
        write_feature_file(&path, &spec, Some(&stats)).unwrap();
        let (header, back) = read_feature_file(&path).unwrap();
        assert_eq!(back, spec);
        assert_eq!(header.normalization.unwrap(), stats);
    }

    #[test]
    fn rms_of_sine() {
        let w = sine(250.0, 1.0, 16_000, 1.0);
        let rms = windowed_rms(w.samples(), 8000, 4000);
        assert!((rms - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-3);
    }
}
