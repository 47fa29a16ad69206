//! Image-quality metrics restricted to the edited region, and the lip-sync proxy.
//!
//! All metrics work in double precision on images mapped to [0, 1].

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::audiofeat::{resample_to_16k, Waveform};
use crate::dataset::write_json;
use crate::error::{invalid, Error, Result};
use crate::raster::{BinaryMask, Image};
use crate::synthgen::rms_envelope;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const PSNR_CAP_DB: f64 = 100.0;
pub const CPBD_BETA: f64 = 3.6;
pub const CPBD_BLOCK: usize = 64;
pub const CPBD_EDGE_BLOCK_FRACTION: f64 = 0.002;
pub const CPBD_JNB_PROBABILITY: f64 = 0.63;
pub const FRECHET_EPS: f64 = 1e-6;
pub const HISTOGRAM_BINS: usize = 64;
pub const THUMB_SIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionMode {
    MaskedRegion,
    FullFrame,
}

/// Unit-range planes cut to a rectangle.
struct Planes {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Planes {
    fn crop(img: &Image, rect: (usize, usize, usize, usize)) -> Self {
        let (y0, y1, x0, x1) = rect;
        let (h, w) = (y1 - y0, x1 - x0);
        let mut data = Vec::with_capacity(img.channels() * h * w);
        for c in 0..img.channels() {
            for y in y0..y1 {
                for x in x0..x1 {
                    data.push((img.get(c, y, x) as f64 + 1.0) / 2.0);
                }
            }
        }
        Self {
            channels: img.channels(),
            height: h,
            width: w,
            data,
        }
    }

    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Luma on a 0–255 scale.
    fn gray255(&self) -> Vec<f64> {
        let n = self.height * self.width;
        if self.channels == 1 {
            return self.data.iter().map(|v| 255.0 * v).collect();
        }
        (0..n)
            .map(|i| 255.0 * (0.299 * self.data[i] + 0.587 * self.data[n + i] + 0.114 * self.data[2 * n + i]))
            .collect()
    }
}

/// Half-open bounding rectangle `(y0, y1, x0, x1)` of the region, or the whole image.
fn region_rect(img: &Image, region: Option<&BinaryMask>) -> Result<(usize, usize, usize, usize)> {
    match region {
        None => Ok((0, img.height(), 0, img.width())),
        Some(mask) => {
            mask.check_matches(img)?;
            mask.bounding_box().ok_or_else(|| invalid!("metric region is empty"))
        }
    }
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            w.push(a * b);
        }
    }
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over
/// every window that fits in the region's bounding box and over channels.
pub fn ssim(a: &Image, b: &Image, region: Option<&BinaryMask>) -> Result<f64> {
    a.ensure_same_shape(b, "ssim")?;
    let rect = region_rect(a, region)?;
    let pa = Planes::crop(a, rect);
    let pb = Planes::crop(b, rect);
    if pa.height < SSIM_WINDOW || pa.width < SSIM_WINDOW {
        return Err(invalid!(
            "SSIM region {}x{} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window",
            pa.height,
            pa.width
        ));
    }
    let win = gaussian_window();
    let (oh, ow) = (pa.height - SSIM_WINDOW + 1, pa.width - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for c in 0..pa.channels {
        for y in 0..oh {
            for x in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let w = win[dy * SSIM_WINDOW + dx];
                        let va = pa.at(c, y + dy, x + dx);
                        let vb = pb.at(c, y + dy, x + dx);
                        ma += w * va;
                        mb += w * vb;
                        saa += w * va * va;
                        sbb += w * vb * vb;
                        sab += w * va * vb;
                    }
                }
                let var_a = saa - ma * ma;
                let var_b = sbb - mb * mb;
                let cov = sab - ma * mb;
                let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2);
                total += num / den;
            }
        }
    }
    Ok(total / (pa.channels * oh * ow) as f64)
}

/// PSNR over the exact region (all pixels when `None`), capped at 100 dB.
pub fn psnr(a: &Image, b: &Image, region: Option<&BinaryMask>) -> Result<f64> {
    a.ensure_same_shape(b, "psnr")?;
    if let Some(m) = region {
        m.check_matches(a)?;
    }
    let (c, h, w) = a.shape();
    let mut sum = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if region.is_none_or(|m| m.is_set(y, x)) {
                    let d = (a.get(ch, y, x) as f64 - b.get(ch, y, x) as f64) / 2.0;
                    sum += d * d;
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(invalid!("metric region is empty"));
    }
    let mse = sum / count as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpbdValue {
    pub value: f64,
    /// Set when the region had no edge blocks; `value` is then 0.
    pub no_edges: bool,
}

fn sobel_x(g: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        g[yy * w + xx]
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            out[y as usize * w + x as usize] = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
        }
    }
    out
}

/// Vertical edge pixels: horizontal Sobel response above four times its
/// mean energy, thinned to horizontal local maxima.
fn detect_edges(g: &[f64], h: usize, w: usize) -> Vec<bool> {
    let gx = sobel_x(g, h, w);
    let energy = gx.iter().map(|v| v * v).sum::<f64>() / gx.len() as f64;
    let cutoff = 4.0 * energy;
    let mut edges = vec![false; h * w];
    if energy == 0.0 {
        return edges;
    }
    for y in 0..h {
        for x in 0..w {
            let v = gx[y * w + x].abs();
            let left = if x > 0 { gx[y * w + x - 1].abs() } else { 0.0 };
            let right = if x + 1 < w { gx[y * w + x + 1].abs() } else { 0.0 };
            edges[y * w + x] = v * v > cutoff && v >= left && v >= right;
        }
    }
    edges
}

/// Distance between the intensity extrema bracketing an edge along its row.
fn marziliano_width(g: &[f64], w: usize, y: usize, x: usize, rising: bool) -> f64 {
    let row = &g[y * w..(y + 1) * w];
    let (mut lo, mut hi) = (x, x);
    if rising {
        while lo > 0 && row[lo - 1] < row[lo] {
            lo -= 1;
        }
        while hi + 1 < w && row[hi + 1] > row[hi] {
            hi += 1;
        }
    } else {
        while lo > 0 && row[lo - 1] > row[lo] {
            lo -= 1;
        }
        while hi + 1 < w && row[hi + 1] < row[hi] {
            hi += 1;
        }
    }
    (hi - lo).max(1) as f64
}

/// Cumulative probability of blur detection over the region's bounding box.
///
/// The box is tiled into 64×64 blocks (edge blocks may be smaller); blocks
/// with more than 0.2 % edge pixels contribute their edges. Each edge gets a
/// blur probability `1 − exp(−(w / w_JNB)^3.6)` with `w_JNB` = 5 for block
/// contrast ≤ 50 and 3 otherwise; the metric is the fraction at or below 0.63.
pub fn cpbd(img: &Image, region: Option<&BinaryMask>) -> Result<CpbdValue> {
    let rect = region_rect(img, region)?;
    let planes = Planes::crop(img, rect);
    let (h, w) = (planes.height, planes.width);
    let gray = planes.gray255();
    let edges = detect_edges(&gray, h, w);
    let grad = sobel_x(&gray, h, w);
    let mut total = 0usize;
    let mut sharp = 0usize;
    for by in (0..h).step_by(CPBD_BLOCK) {
        for bx in (0..w).step_by(CPBD_BLOCK) {
            let (ey, ex) = ((by + CPBD_BLOCK).min(h), (bx + CPBD_BLOCK).min(w));
            let mut count = 0usize;
            let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
            for y in by..ey {
                for x in bx..ex {
                    count += edges[y * w + x] as usize;
                    min = min.min(gray[y * w + x]);
                    max = max.max(gray[y * w + x]);
                }
            }
            let area = ((ey - by) * (ex - bx)) as f64;
            if count == 0 || (count as f64) <= CPBD_EDGE_BLOCK_FRACTION * area {
                continue;
            }
            let jnb = if max - min <= 50.0 { 5.0 } else { 3.0 };
            for y in by..ey {
                for x in bx..ex {
                    if !edges[y * w + x] {
                        continue;
                    }
                    let width = marziliano_width(&gray, w, y, x, grad[y * w + x] > 0.0);
                    let p_blur = 1.0 - (-(width / jnb).powf(CPBD_BETA)).exp();
                    total += 1;
                    if p_blur <= CPBD_JNB_PROBABILITY {
                        sharp += 1;
                    }
                }
            }
        }
    }
    if total == 0 {
        return Ok(CpbdValue {
            value: 0.0,
            no_edges: true,
        });
    }
    Ok(CpbdValue {
        value: sharp as f64 / total as f64,
        no_edges: false,
    })
}

/// Mean and covariance of a feature distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct FrechetStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FrechetStats {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(invalid!("covariance has {} entries, expected {}", cov.len(), d * d));
        }
        Ok(Self {
            mean: DVector::from_vec(mean),
            cov: DMatrix::from_row_slice(d, d, &cov),
        })
    }

    /// Sample mean and unbiased covariance (zero covariance for one sample).
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n == 0 {
            return Err(invalid!("no feature vectors"));
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return Err(invalid!("feature vectors differ in length"));
        }
        let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
        let mut centered = x;
        for j in 0..d {
            let m = mean[j];
            centered.column_mut(j).add_scalar_mut(-m);
        }
        let cov = if n > 1 {
            centered.transpose() * &centered / (n - 1) as f64
        } else {
            DMatrix::zeros(d, d)
        };
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Eigenvalues and eigenvectors of a symmetric matrix.
///
/// Rows that are exactly zero are split off first (they are eigenvectors
/// with eigenvalue 0); nalgebra's solver can return NaN when many are present.
fn sym_eigen(m: &DMatrix<f64>) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let n = m.nrows();
    let live: Vec<usize> = (0..n).filter(|&i| m.row(i).iter().any(|v| *v != 0.0)).collect();
    let mut vals = DVector::zeros(n);
    let mut vecs = DMatrix::zeros(n, n);
    let mut col = 0;
    if !live.is_empty() {
        let eig = SymmetricEigen::new(m.select_rows(&live).select_columns(&live));
        if eig.eigenvalues.iter().chain(eig.eigenvectors.iter()).any(|v| !v.is_finite()) {
            return None;
        }
        for j in 0..live.len() {
            vals[col] = eig.eigenvalues[j];
            for (r, &i) in live.iter().enumerate() {
                vecs[(i, col)] = eig.eigenvectors[(r, j)];
            }
            col += 1;
        }
    }
    for i in (0..n).filter(|i| !live.contains(i)) {
        vecs[(i, col)] = 1.0;
        col += 1;
    }
    Some((vals, vecs))
}

fn check_psd(c: &DMatrix<f64>, which: &str) -> Result<()> {
    let scale = c.abs().max().max(1.0);
    if (c - c.transpose()).abs().max() > 1e-9 * scale {
        return Err(invalid!("{which} covariance is not symmetric"));
    }
    let (vals, _) = sym_eigen(c).ok_or_else(|| invalid!("{which} covariance has no eigendecomposition"))?;
    let min = vals.min();
    if min < -1e-6 * scale {
        return Err(invalid!("{which} covariance is not positive semidefinite (eigenvalue {min:e})"));
    }
    Ok(())
}

/// `tr sqrt(sqrt(Ca) · Cb · sqrt(Ca))`, or `None` if the product is not
/// numerically positive semidefinite.
///
/// Only the numerical range of `Ca` is kept, so the eigenproblem is `r × r`
/// with `r = rank(Ca)`. Null directions would otherwise each contribute the
/// square root of a roundoff-sized eigenvalue.
fn trace_sqrt_product(ca: &DMatrix<f64>, cb: &DMatrix<f64>) -> Option<f64> {
    let (evals, evecs) = sym_eigen(ca)?;
    let top = evals.max().max(0.0);
    let floor = ca.nrows() as f64 * f64::EPSILON * top;
    let keep: Vec<usize> = (0..ca.nrows()).filter(|&i| evals[i] > floor).collect();
    if keep.is_empty() {
        return Some(0.0);
    }
    // A = U_r · Λ_r^{1/2}; A^T Cb A has the nonzero spectrum of sqrt(Ca) Cb sqrt(Ca).
    let a = DMatrix::from_fn(ca.nrows(), keep.len(), |i, j| {
        evecs[(i, keep[j])] * evals[keep[j]].sqrt()
    });
    let mut m = a.transpose() * cb * &a;
    m = (&m + m.transpose()) * 0.5;
    let (vals, _) = sym_eigen(&m)?;
    let scale = vals.abs().max().max(1e-300);
    if vals.iter().any(|&v| v < -1e-8 * scale) {
        return None;
    }
    let tr: f64 = vals.iter().map(|v| v.max(0.0).sqrt()).sum();
    tr.is_finite().then_some(tr)
}

/// `‖μa − μb‖² + tr(Ca + Cb − 2 (Ca·Cb)^{1/2})`.
pub fn frechet_distance(a: &FrechetStats, b: &FrechetStats) -> Result<f64> {
    if a.dim() != b.dim() || a.cov.nrows() != a.dim() || b.cov.nrows() != b.dim() {
        return Err(invalid!("Frechet statistics have mismatched dimensions"));
    }
    check_psd(&a.cov, "first")?;
    check_psd(&b.cov, "second")?;
    let diff = &a.mean - &b.mean;
    let mut tr = trace_sqrt_product(&a.cov, &b.cov);
    let mut offset = 0.0;
    if tr.is_none() {
        let eye = DMatrix::<f64>::identity(a.dim(), a.dim()) * FRECHET_EPS;
        tr = trace_sqrt_product(&(&a.cov + &eye), &(&b.cov + &eye));
        offset = 2.0 * FRECHET_EPS * a.dim() as f64;
    }
    let tr = tr.ok_or_else(|| invalid!("matrix square root failed to stabilize"))?;
    let d = diff.dot(&diff) + a.cov.trace() + b.cov.trace() + offset - 2.0 * tr;
    Ok(d.max(0.0))
}

/// 64-bin per-channel histograms (normalized) followed by an 8×8 per-channel
/// thumbnail of the region's bounding box.
pub fn image_features(img: &Image, region: Option<&BinaryMask>) -> Result<Vec<f64>> {
    let rect = region_rect(img, region)?;
    let p = Planes::crop(img, rect);
    let (h, w) = (p.height, p.width);
    let mut out = Vec::with_capacity(p.channels * (HISTOGRAM_BINS + THUMB_SIDE * THUMB_SIDE));
    for c in 0..p.channels {
        let mut hist = vec![0.0; HISTOGRAM_BINS];
        for y in 0..h {
            for x in 0..w {
                let v = p.at(c, y, x).clamp(0.0, 1.0);
                let bin = ((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
                hist[bin] += 1.0;
            }
        }
        let n = (h * w) as f64;
        out.extend(hist.iter().map(|v| v / n));
    }
    let span = |i: usize, len: usize| {
        let lo = i * len / THUMB_SIDE;
        let hi = ((i + 1) * len / THUMB_SIDE).max(lo + 1).min(len);
        (lo.min(len - 1), hi)
    };
    for c in 0..p.channels {
        for i in 0..THUMB_SIDE {
            let (y0, y1) = span(i, h);
            for j in 0..THUMB_SIDE {
                let (x0, x1) = span(j, w);
                let mut acc = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += p.at(c, y, x);
                    }
                }
                out.push(acc / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    Ok(out)
}

/// Pearson correlation; an error when either series is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(invalid!("correlation needs two equally long series of length >= 2"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(invalid!("correlation is undefined for a constant series"));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Correlation between the mouth apertures read from `frames` and the
/// per-frame RMS envelope of `audio`.
pub fn sync_proxy(frames: &[Image], audio: &Waveform, extractor: &dyn Fn(&Image) -> Result<f64>) -> Result<f64> {
    let apertures = frames.iter().map(extractor).collect::<Result<Vec<_>>>()?;
    let audio = resample_to_16k(audio)?;
    let envelope = rms_envelope(&audio, frames.len());
    pearson(&apertures, &envelope)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub clip: String,
    pub frames: usize,
    pub ssim: f64,
    pub psnr_db: f64,
    pub cpbd: f64,
    pub cpbd_no_edges: bool,
    pub frechet: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sync_proxy_r: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub ssim: f64,
    pub psnr_db: f64,
    pub cpbd: f64,
    pub frechet: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sync_proxy_r: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fingerprint: String,
    pub seed: u64,
    pub region_mode: RegionMode,
    pub clips: Vec<ClipMetrics>,
    pub aggregate: Aggregate,
}

/// One generated / reference clip pair to score.
pub struct ClipPair<'a> {
    pub name: String,
    pub generated: &'a [Image],
    pub reference: &'a [Image],
    pub masks: &'a [BinaryMask],
    /// Audio the generated clip should be in sync with, if any.
    pub audio: Option<&'a Waveform>,
}

struct ClipScore {
    metrics: ClipMetrics,
    gen_features: Vec<Vec<f64>>,
    ref_features: Vec<Vec<f64>>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Scores the edited frames (index ≥ 1; all frames for a single-frame clip).
fn score_clip(pair: &ClipPair<'_>, mode: RegionMode, extractor: &dyn Fn(&Image) -> Result<f64>) -> Result<ClipScore> {
    let n = pair.generated.len();
    if n == 0 || pair.reference.len() != n || pair.masks.len() != n {
        return Err(Error::Data(format!(
            "{}: {} generated frames, {} reference frames, {} masks",
            pair.name,
            n,
            pair.reference.len(),
            pair.masks.len()
        )));
    }
    let first = if n > 1 { 1 } else { 0 };
    let (mut ssims, mut psnrs, mut cpbds) = (Vec::new(), Vec::new(), Vec::new());
    let mut no_edges = false;
    let (mut gf, mut rf) = (Vec::new(), Vec::new());
    for i in first..n {
        let region = match mode {
            RegionMode::MaskedRegion => Some(&pair.masks[i]),
            RegionMode::FullFrame => None,
        };
        let (g, r) = (&pair.generated[i], &pair.reference[i]);
        ssims.push(ssim(g, r, region)?);
        psnrs.push(psnr(g, r, region)?);
        let c = cpbd(g, region)?;
        no_edges |= c.no_edges;
        cpbds.push(c.value);
        gf.push(image_features(g, region)?);
        rf.push(image_features(r, region)?);
    }
    let frechet = frechet_distance(&FrechetStats::from_features(&gf)?, &FrechetStats::from_features(&rf)?)?;
    let sync_proxy_r = match pair.audio {
        Some(a) => Some(sync_proxy(pair.generated, a, extractor)?),
        None => None,
    };
    Ok(ClipScore {
        metrics: ClipMetrics {
            clip: pair.name.clone(),
            frames: n - first,
            ssim: mean(ssims.into_iter()),
            psnr_db: mean(psnrs.into_iter()),
            cpbd: mean(cpbds.into_iter()),
            cpbd_no_edges: no_edges,
            frechet,
            sync_proxy_r,
        },
        gen_features: gf,
        ref_features: rf,
    })
}

/// Per-clip rows plus aggregates; the aggregate Fréchet distance pools
/// features over all clips.
pub fn evaluate(
    pairs: &[ClipPair<'_>],
    mode: RegionMode,
    extractor: &dyn Fn(&Image) -> Result<f64>,
    fingerprint: &str,
    seed: u64,
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(invalid!("nothing to evaluate"));
    }
    let scores = pairs
        .iter()
        .map(|p| score_clip(p, mode, extractor))
        .collect::<Result<Vec<_>>>()?;
    let gen: Vec<Vec<f64>> = scores.iter().flat_map(|s| s.gen_features.iter().cloned()).collect();
    let refs: Vec<Vec<f64>> = scores.iter().flat_map(|s| s.ref_features.iter().cloned()).collect();
    let frechet = frechet_distance(&FrechetStats::from_features(&gen)?, &FrechetStats::from_features(&refs)?)?;
    let clips: Vec<ClipMetrics> = scores.into_iter().map(|s| s.metrics).collect();
    let syncs: Vec<f64> = clips.iter().filter_map(|c| c.sync_proxy_r).collect();
    let aggregate = Aggregate {
        ssim: mean(clips.iter().map(|c| c.ssim)),
        psnr_db: mean(clips.iter().map(|c| c.psnr_db)),
        cpbd: mean(clips.iter().map(|c| c.cpbd)),
        frechet,
        sync_proxy_r: (!syncs.is_empty()).then(|| mean(syncs.into_iter())),
    };
    Ok(MetricReport {
        fingerprint: fingerprint.to_string(),
        seed,
        region_mode: mode,
        clips,
        aggregate,
    })
}

pub fn write_report_json(path: &Path, report: &MetricReport) -> Result<()> {
    write_json(path, report)
}

pub fn write_report_csv(path: &Path, report: &MetricReport) -> Result<()> {
    let mut text = String::from("clip,frames,ssim,psnr_db,cpbd,cpbd_no_edges,frechet,sync_proxy_r\n");
    for c in &report.clips {
        let sync = c.sync_proxy_r.map(|r| format!("{r:.9}")).unwrap_or_default();
        text.push_str(&format!(
            "{},{},{:.9},{:.9},{:.9},{},{:.9},{}\n",
            c.clip, c.frames, c.ssim, c.psnr_db, c.cpbd, c.cpbd_no_edges, c.frechet, sync
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io("writing", path, e))
}
