//! Planar image and binary-mask containers shared by every stage.
//!
//! Images are stored channel-major (`C × H × W`) with values in `[-1, 1]`,
//! the range the diffusion model operates in.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(invalid!("image dimensions must be positive, got {channels}x{height}x{width}"));
        }
        if data.len() != channels * height * width {
            return Err(invalid!(
                "image buffer has {} values, expected {}",
                data.len(),
                channels * height * width
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> Vec<f32> {
        (0..self.channels).map(|c| self.get(c, y, x)).collect()
    }

    pub fn ensure_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(invalid!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            ));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// Values mapped from `[-1, 1]` into `[0, 1]` (used by the metrics).
    pub fn to_unit_range(&self) -> Vec<f64> {
        self.data.iter().map(|&v| ((v as f64) + 1.0) * 0.5).collect()
    }

    /// `[1, C, H, W]` tensor on `device`.
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, self.channels, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Reads a `[C, H, W]` or `[1, C, H, W]` tensor back into an image.
    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => return Err(invalid!("expected a rank 3 or 4 tensor, got rank {r}")),
        };
        let (c, h, w) = t.dims3()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Image::new(c, h, w, data)
    }

    /// Bilinear resampling of the axis-aligned box `(x0, y0, side_x, side_y)`
    /// (pixel units, may be fractional) onto an `out_h × out_w` grid.
    pub fn resample_box(&self, x0: f64, y0: f64, side_x: f64, side_y: f64, out_h: usize, out_w: usize) -> Image {
        let mut out = Image::zeros(self.channels, out_h, out_w);
        let sx = side_x / out_w as f64;
        let sy = side_y / out_h as f64;
        for oy in 0..out_h {
            // pixel centers map onto pixel centers
            let fy = (y0 + (oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y_lo = fy.floor() as usize;
            let y_hi = (y_lo + 1).min(self.height - 1);
            let wy = fy - y_lo as f64;
            for ox in 0..out_w {
                let fx = (x0 + (ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x_lo = fx.floor() as usize;
                let x_hi = (x_lo + 1).min(self.width - 1);
                let wx = fx - x_lo as f64;
                for c in 0..self.channels {
                    let v00 = self.get(c, y_lo, x_lo) as f64;
                    let v01 = self.get(c, y_lo, x_hi) as f64;
                    let v10 = self.get(c, y_hi, x_lo) as f64;
                    let v11 = self.get(c, y_hi, x_hi) as f64;
                    let top = v00 + (v01 - v00) * wx;
                    let bot = v10 + (v11 - v10) * wx;
                    out.set(c, oy, ox, (top + (bot - top) * wy) as f32);
                }
            }
        }
        out
    }

    /// Writes an RGB PNG, quantizing `[-1, 1]` to 8 bits.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        if self.channels != 3 {
            return Err(invalid!("PNG export needs 3 channels, got {}", self.channels));
        }
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = [0, 1, 2].map(|c| quantize(self.get(c, y, x)));
                buf.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::zeros(3, h, w);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, dequantize(px.0[c]));
            }
        }
        Ok(out)
    }
}

pub fn quantize(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

pub fn dequantize(v: u8) -> f32 {
    v as f32 / 255.0 * 2.0 - 1.0
}

/// Single-channel `{0, 1}` map aligned with an image's pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(invalid!("mask buffer has {} values, expected {}", data.len(), height * width));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(invalid!("mask values must be 0 or 1"));
        }
        Ok(Self { height, width, data })
    }

    pub fn full(height: usize, width: usize, on: bool) -> Self {
        Self {
            height,
            width,
            data: vec![on as u8; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn is_set(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Inclusive-exclusive pixel bounding box `(y0, y1, x0, x1)` of the set pixels.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.is_set(y, x) {
                    bb = Some(match bb {
                        None => (y, y + 1, x, x + 1),
                        Some((y0, y1, x0, x1)) => (y0.min(y), y1.max(y + 1), x0.min(x), x1.max(x + 1)),
                    });
                }
            }
        }
        bb
    }

    pub fn check_matches(&self, img: &Image) -> Result<()> {
        if self.height != img.height() || self.width != img.width() {
            return Err(invalid!(
                "mask is {}x{} but image is {}x{}",
                self.height,
                self.width,
                img.height(),
                img.width()
            ));
        }
        Ok(())
    }

    /// Per-pixel values as `f32` (0.0 / 1.0).
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    /// Mask replicated over `channels`, shaped `[1, C, H, W]`.
    pub fn to_tensor(&self, channels: usize, device: &Device, dtype: DType) -> Result<Tensor> {
        let plane = self.to_f32();
        let mut data = Vec::with_capacity(plane.len() * channels);
        for _ in 0..channels {
            data.extend_from_slice(&plane);
        }
        Ok(Tensor::from_vec(data, (1, channels, self.height, self.width), device)?.to_dtype(dtype)?)
    }
}
