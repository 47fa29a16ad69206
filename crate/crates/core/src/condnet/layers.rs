//! Parameter storage and the basic layers the U-Net is assembled from.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{GroupNormOp, Im2Col, PatchGeometry};
use crate::error::{invalid, Error, Result};

/// Named, seeded-initialized trainable parameters.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    device: Device,
    dtype: DType,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, device: &Device, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            device: device.clone(),
            dtype,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    fn insert(&mut self, name: String, data: Vec<f64>, shape: &[usize]) -> Result<Var> {
        if self.vars.contains_key(&name) {
            return Err(invalid!("duplicate parameter name {name}"));
        }
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.insert(name, var.clone());
        Ok(var)
    }

    pub fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.insert(name, data, shape)
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    /// Snapshot of every parameter's current value.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: std::collections::HashMap<String, Tensor> = self.tensors().into_iter().collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Overwrites every parameter from `tensors`, which must match names and shapes exactly.
    pub fn assign(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        if tensors.len() != self.vars.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} tensors, model expects {}",
                tensors.len(),
                self.vars.len()
            )));
        }
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Data(format!("checkpoint is missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Data(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        let map = load_tensors(path, &self.device)?;
        self.assign(&map)
    }
}

pub fn load_tensors(path: &Path, device: &Device) -> Result<BTreeMap<String, Tensor>> {
    if !path.exists() {
        return Err(Error::Data(format!("{} does not exist", path.display())));
    }
    Ok(candle_core::safetensors::load(path, device)?.into_iter().collect())
}

/// Whether dropout is active, and the generator that draws its masks.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

pub fn dropout(x: &Tensor, p: f64, mode: &mut Mode<'_>) -> Result<Tensor> {
    let rng = match mode {
        Mode::Train(rng) if p > 0.0 => rng,
        _ => return Ok(x.clone()),
    };
    let keep = 1.0 - p;
    let scale = 1.0 / keep;
    let mask: Vec<f64> = (0..x.elem_count())
        .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        Self::with_scale(store, name, inputs, outputs, 1.0)
    }

    pub fn with_scale(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, scale: f64) -> Result<Self> {
        let bound = scale / (inputs as f64).sqrt();
        let weight = store.uniform(format!("{name}.weight"), &[outputs, inputs], bound)?;
        let bias = store.uniform(format!("{name}.bias"), &[outputs], bound)?;
        Ok(Self { weight, bias })
    }

    /// `[B, in]` → `[B, out]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.as_tensor().t()?)?;
        Ok(y.broadcast_add(self.bias.as_tensor())?)
    }
}

pub struct Conv2d {
    weight: Var,
    bias: Var,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        Self::with_scale(store, name, in_channels, out_channels, kernel, stride, 1.0)
    }

    pub fn with_scale(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        scale: f64,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let bound = scale / (fan_in as f64).sqrt();
        let weight = store.uniform(format!("{name}.weight"), &[out_channels, in_channels, kernel, kernel], bound)?;
        let bias = store.uniform(format!("{name}.bias"), &[out_channels], bound)?;
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(invalid!("conv expects {} input channels, got {c}", self.in_channels));
        }
        let geometry = PatchGeometry {
            channels: c,
            height: h,
            width: w,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        };
        let (oh, ow) = (geometry.out_height(), geometry.out_width());
        let cols = if self.kernel == 1 && self.stride == 1 {
            x.reshape((n, c, h * w))?
        } else {
            x.contiguous()?.apply_op1(Im2Col(geometry))?
        };
        let w = self
            .weight
            .as_tensor()
            .reshape((self.out_channels, c * self.kernel * self.kernel))?;
        let y = w.broadcast_matmul(&cols)?;
        let y = y.broadcast_add(&self.bias.as_tensor().reshape((1, self.out_channels, 1))?)?;
        Ok(y.reshape((n, self.out_channels, oh, ow))?)
    }
}

/// Group count used everywhere: `min(32, channels)`, reduced to a divisor.
pub fn group_count(channels: usize) -> usize {
    let mut g = channels.min(32);
    while channels % g != 0 {
        g -= 1;
    }
    g
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Affine-free group normalization.
pub fn group_norm(x: &Tensor, groups: usize) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(GroupNormOp {
        groups,
        eps: GROUP_NORM_EPS,
    })?)
}

/// Group normalization followed by a learned per-channel affine map.
pub struct GroupNorm {
    groups: usize,
    weight: Var,
    bias: Var,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            groups: group_count(channels),
            weight: store.constant(format!("{name}.weight"), &[channels], 1.0)?,
            bias: store.constant(format!("{name}.bias"), &[channels], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.weight.dims()[0];
        let y = group_norm(x, self.groups)?;
        let shape = broadcast_channel_shape(x.rank(), c);
        let y = y.broadcast_mul(&self.weight.as_tensor().reshape(shape.clone())?)?;
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape(shape)?)?)
    }
}

/// `[1, C, 1, 1, ...]` for a rank-`rank` activation.
pub fn broadcast_channel_shape(rank: usize, channels: usize) -> Vec<usize> {
    let mut s = vec![1; rank];
    s[1] = channels;
    s
}

/// Nearest-neighbour 2× upsampling expressed with broadcasting.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let y = x
        .reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((n, c, 2 * h, 2 * w))?;
    Ok(y)
}

pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_candle_reference() {
        let dev = Device::Cpu;
        let mut store = ParamStore::new(3, &dev, DType::F64);
        let conv = Conv2d::new(&mut store, "c", 3, 5, 3, 2).unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 3, 8, 8), &dev).unwrap();
        let out = conv.forward(&x).unwrap();
        let reference = x
            .conv2d(conv.weight.as_tensor(), 1, 2, 1, 1)
            .unwrap()
            .broadcast_add(&conv.bias.as_tensor().reshape((1, 5, 1, 1)).unwrap())
            .unwrap();
        let diff = (out - reference).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn upsample_repeats_pixels() {
        let x = Tensor::from_vec(vec![1f32, 2., 3., 4.], (1, 1, 2, 2), &Device::Cpu).unwrap();
        let y = upsample_nearest2x(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(y, vec![1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]);
    }

    #[test]
    fn group_counts() {
        assert_eq!(group_count(64), 32);
        assert_eq!(group_count(8), 8);
        assert_eq!(group_count(48), 24);
        assert_eq!(group_count(192), 32);
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let dev = Device::Cpu;
        let mut a = ParamStore::new(9, &dev, DType::F32);
        let mut b = ParamStore::new(9, &dev, DType::F32);
        Linear::new(&mut a, "l", 4, 3).unwrap();
        Linear::new(&mut b, "l", 4, 3).unwrap();
        let ta = a.tensors()["l.weight"].flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let tb = b.tensors()["l.weight"].flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(ta, tb);
    }
}
