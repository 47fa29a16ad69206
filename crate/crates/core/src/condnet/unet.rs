//! Denoising U-Net with audio / noise-level FiLM residual blocks.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::layers::{dropout, group_count, group_norm, upsample_nearest2x, Conv2d, GroupNorm, Linear, Mode, ParamStore};
use crate::audiofeat::{AudioWindow, N_MELS, WINDOW_ROWS};
use crate::error::{invalid, Result};
use crate::raster::Image;
use crate::videoprep::ConditioningInput;

/// Multiplier applied to `sqrt(ᾱ)` before the sinusoidal embedding.
pub const NOISE_EMBED_SCALE: f64 = 1000.0;
/// Init scale of the output convolution relative to the default fan-in bound.
pub const OUTPUT_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub image_size: usize,
    pub in_channels: usize,
    #[serde(default = "default_out_channels")]
    pub out_channels: usize,
    pub inner_channels: usize,
    pub channel_multiples: Vec<usize>,
    pub res_blocks_per_stage: usize,
    /// Feature-map sizes with self-attention in the down/up paths. The
    /// middle block always has attention.
    pub attention_resolutions: Vec<usize>,
    pub head_channels: usize,
    pub dropout: f64,
}

fn default_out_channels() -> usize {
    3
}

impl UNetConfig {
    /// Single-speaker column of the reference hyperparameters.
    pub fn single_speaker() -> Self {
        Self {
            image_size: 128,
            in_channels: 9,
            out_channels: 3,
            inner_channels: 64,
            channel_multiples: vec![1, 2, 4, 8],
            res_blocks_per_stage: 2,
            attention_resolutions: vec![],
            head_channels: 32,
            dropout: 0.2,
        }
    }

    /// Multi-speaker column: multiples [1, 2, 3], attention at 32×32.
    pub fn multi_speaker() -> Self {
        Self {
            channel_multiples: vec![1, 2, 3],
            attention_resolutions: vec![32],
            ..Self::single_speaker()
        }
    }

    /// Small network for CPU-scale experiments.
    pub fn desk(image_size: usize) -> Self {
        Self {
            image_size,
            in_channels: 9,
            out_channels: 3,
            inner_channels: 32,
            channel_multiples: vec![1, 2, 2],
            res_blocks_per_stage: 1,
            attention_resolutions: vec![],
            head_channels: 32,
            dropout: 0.0,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        4 * self.inner_channels
    }

    pub fn audio_dim(&self) -> usize {
        WINDOW_ROWS * N_MELS
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 9 && self.in_channels != 10 {
            return Err(invalid!("input channels must be 9 or 10, got {}", self.in_channels));
        }
        if self.channel_multiples.is_empty() || self.channel_multiples.contains(&0) {
            return Err(invalid!("channel multiples must be non-empty and positive"));
        }
        if self.channel_multiples.windows(2).any(|w| w[1] < w[0]) {
            return Err(invalid!("channel multiples must be non-decreasing"));
        }
        if self.inner_channels == 0 || self.head_channels == 0 || self.res_blocks_per_stage == 0 {
            return Err(invalid!("channel counts and block counts must be positive"));
        }
        let factor = 1usize << (self.channel_multiples.len() - 1);
        if self.image_size == 0 || self.image_size % factor != 0 {
            return Err(invalid!(
                "image size {} not divisible by the {factor}× downsampling",
                self.image_size
            ));
        }
        for &r in &self.attention_resolutions {
            if !r.is_power_of_two() || r > self.image_size {
                return Err(invalid!("attention resolution {r} must be a power of two <= {}", self.image_size));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid!("dropout must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Scale / bias vectors applied by one FiLM residual block, each `[B, C]`.
#[derive(Debug, Clone)]
pub struct FilmCondition {
    pub audio_scale: Tensor,
    pub audio_bias: Tensor,
    pub noise_scale: Tensor,
    pub noise_bias: Tensor,
}

impl FilmCondition {
    fn channels(&self) -> Result<usize> {
        let c = self.audio_scale.dim(1)?;
        for t in [&self.audio_bias, &self.noise_scale, &self.noise_bias] {
            if t.dim(1)? != c {
                return Err(invalid!("FiLM vectors disagree on channel count"));
            }
        }
        Ok(c)
    }
}

/// Core modulation of a conditional block:
/// `z_s · (t_s · GN(h + t_b)) + z_b`, with per-channel vectors.
pub fn film(h: &Tensor, cond: &FilmCondition) -> Result<Tensor> {
    let (b, c, _, _) = h.dims4()?;
    if cond.channels()? != c {
        return Err(invalid!(
            "FiLM vectors have {} channels, hidden state has {c}",
            cond.channels()?
        ));
    }
    let col = |t: &Tensor| t.reshape((b, c, 1, 1));
    let shifted = h.broadcast_add(&col(&cond.noise_bias)?)?;
    let normed = group_norm(&shifted, group_count(c))?;
    let y = normed.broadcast_mul(&col(&cond.noise_scale)?)?;
    let y = y.broadcast_mul(&col(&cond.audio_scale)?)?;
    Ok(y.broadcast_add(&col(&cond.audio_bias)?)?)
}

/// Sinusoidal features of `NOISE_EMBED_SCALE · sqrt(ᾱ)`, `[B, dim]`.
pub fn sinusoidal_noise_features(alpha_bars: &[f64], dim: usize, device: &Device, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(alpha_bars.len() * dim);
    for &ab in alpha_bars {
        if !(ab > 0.0 && ab < 1.0) {
            return Err(invalid!("noise level alpha_bar must lie in (0, 1), got {ab}"));
        }
        let pos = NOISE_EMBED_SCALE * ab.sqrt();
        let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp());
        let (sin, cos): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((pos * f).sin(), (pos * f).cos())).unzip();
        data.extend(sin);
        data.extend(cos);
        data.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    Ok(Tensor::from_vec(data, (alpha_bars.len(), dim), device)?.to_dtype(dtype)?)
}

/// Two linear layers separated by SiLU.
struct Mlp {
    first: Linear,
    second: Linear,
}

impl Mlp {
    fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        Ok(Self {
            first: Linear::new(store, &format!("{name}.0"), inputs, outputs)?,
            second: Linear::new(store, &format!("{name}.1"), outputs, outputs)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.second.forward(&self.first.forward(x)?.silu()?)
    }
}

pub struct FilmResBlock {
    norm_in: GroupNorm,
    conv_in: Conv2d,
    noise_proj: Linear,
    audio_proj: Linear,
    conv_out: Conv2d,
    skip: Option<Conv2d>,
    out_channels: usize,
    dropout: f64,
}

impl FilmResBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        emb_dim: usize,
        dropout: f64,
    ) -> Result<Self> {
        Ok(Self {
            norm_in: GroupNorm::new(store, &format!("{name}.norm_in"), in_channels)?,
            conv_in: Conv2d::new(store, &format!("{name}.conv_in"), in_channels, out_channels, 3, 1)?,
            noise_proj: Linear::new(store, &format!("{name}.noise_proj"), emb_dim, 2 * out_channels)?,
            audio_proj: Linear::new(store, &format!("{name}.audio_proj"), emb_dim, 2 * out_channels)?,
            conv_out: Conv2d::new(store, &format!("{name}.conv_out"), out_channels, out_channels, 3, 1)?,
            skip: if in_channels != out_channels {
                Some(Conv2d::new(store, &format!("{name}.skip"), in_channels, out_channels, 1, 1)?)
            } else {
                None
            },
            out_channels,
            dropout,
        })
    }

    /// Block-specific FiLM vectors projected from the shared trunk embeddings.
    /// Scales are parameterized as `1 + projection`.
    pub fn condition(&self, noise_emb: &Tensor, audio_emb: &Tensor) -> Result<FilmCondition> {
        let c = self.out_channels;
        let t = self.noise_proj.forward(&noise_emb.silu()?)?;
        let z = self.audio_proj.forward(&audio_emb.silu()?)?;
        Ok(FilmCondition {
            noise_scale: (t.narrow(1, 0, c)? + 1.0)?,
            noise_bias: t.narrow(1, c, c)?,
            audio_scale: (z.narrow(1, 0, c)? + 1.0)?,
            audio_bias: z.narrow(1, c, c)?,
        })
    }

    pub fn forward(&self, x: &Tensor, noise_emb: &Tensor, audio_emb: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        let h = self.conv_in.forward(&self.norm_in.forward(x)?.silu()?)?;
        let cond = self.condition(noise_emb, audio_emb)?;
        let h = film(&h, &cond)?.silu()?;
        let h = dropout(&h, self.dropout, mode)?;
        let h = self.conv_out.forward(&h)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Multi-head self-attention over spatial positions.
pub struct SelfAttention {
    norm: GroupNorm,
    qkv: Conv2d,
    proj: Conv2d,
    heads: usize,
    channels: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, head_channels: usize) -> Result<Self> {
        let heads = (channels / head_channels).max(1);
        if channels % heads != 0 {
            return Err(invalid!("{channels} channels cannot be split into {heads} heads"));
        }
        Ok(Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), channels)?,
            qkv: Conv2d::new(store, &format!("{name}.qkv"), channels, 3 * channels, 1, 1)?,
            proj: Conv2d::new(store, &format!("{name}.proj"), channels, channels, 1, 1)?,
            heads,
            channels,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let l = h * w;
        let hd = self.channels / self.heads;
        let qkv = self.qkv.forward(&self.norm.forward(x)?)?.reshape((b, 3, self.heads, hd, l))?;
        let part = |i: usize| -> Result<Tensor> { Ok(qkv.narrow(1, i, 1)?.reshape((b * self.heads, hd, l))?) };
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let scale = 1.0 / (hd as f64).sqrt();
        let scores = (q.transpose(1, 2)?.contiguous()?.matmul(&k)? * scale)?;
        let attn = super::layers::softmax_last_dim(&scores)?;
        let out = v.matmul(&attn.transpose(1, 2)?.contiguous()?)?;
        let out = self.proj.forward(&out.reshape((b, c, h, w))?)?;
        Ok((x + out)?)
    }
}

struct DownStage {
    res: FilmResBlock,
    attn: Option<SelfAttention>,
}

struct UpStage {
    res: FilmResBlock,
    attn: Option<SelfAttention>,
    upsample: Option<Conv2d>,
}

pub struct UNet {
    config: UNetConfig,
    input_conv: Conv2d,
    noise_mlp: Mlp,
    audio_mlp: Mlp,
    down: Vec<DownStage>,
    downsamplers: Vec<Option<Conv2d>>,
    mid_first: FilmResBlock,
    mid_attn: SelfAttention,
    mid_second: FilmResBlock,
    up: Vec<UpStage>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    device: Device,
    dtype: DType,
}

impl UNet {
    pub fn new(config: &UNetConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let inner = config.inner_channels;
        let emb = config.embedding_dim();
        let input_conv = Conv2d::new(store, "input_conv", config.in_channels, inner, 3, 1)?;
        let noise_mlp = Mlp::new(store, "noise_mlp", inner, emb)?;
        let audio_mlp = Mlp::new(store, "audio_mlp", config.audio_dim(), emb)?;

        let levels = config.channel_multiples.len();
        let mut skips = vec![inner];
        let mut ch = inner;
        let mut res = config.image_size;
        let mut down = Vec::new();
        let mut downsamplers = Vec::new();
        for (level, &mult) in config.channel_multiples.iter().enumerate() {
            let out = inner * mult;
            for i in 0..config.res_blocks_per_stage {
                let name = format!("down.{level}.{i}");
                let block = FilmResBlock::new(store, &format!("{name}.res"), ch, out, emb, config.dropout)?;
                ch = out;
                let attn = if config.attention_resolutions.contains(&res) {
                    Some(SelfAttention::new(store, &format!("{name}.attn"), ch, config.head_channels)?)
                } else {
                    None
                };
                down.push(DownStage { res: block, attn });
                downsamplers.push(None);
                skips.push(ch);
            }
            if level + 1 < levels {
                let conv = Conv2d::new(store, &format!("down.{level}.downsample"), ch, ch, 3, 2)?;
                *downsamplers.last_mut().expect("at least one block per level") = Some(conv);
                skips.push(ch);
                res /= 2;
            }
        }

        let mid_first = FilmResBlock::new(store, "mid.res0", ch, ch, emb, config.dropout)?;
        let mid_attn = SelfAttention::new(store, "mid.attn", ch, config.head_channels)?;
        let mid_second = FilmResBlock::new(store, "mid.res1", ch, ch, emb, config.dropout)?;

        let mut up = Vec::new();
        for (level, &mult) in config.channel_multiples.iter().enumerate().rev() {
            let out = inner * mult;
            for i in 0..=config.res_blocks_per_stage {
                let name = format!("up.{level}.{i}");
                let skip = skips.pop().expect("skip stack matches the down path");
                let block = FilmResBlock::new(store, &format!("{name}.res"), ch + skip, out, emb, config.dropout)?;
                ch = out;
                let attn = if config.attention_resolutions.contains(&res) {
                    Some(SelfAttention::new(store, &format!("{name}.attn"), ch, config.head_channels)?)
                } else {
                    None
                };
                let upsample = if level > 0 && i == config.res_blocks_per_stage {
                    res *= 2;
                    Some(Conv2d::new(store, &format!("{name}.upsample"), ch, ch, 3, 1)?)
                } else {
                    None
                };
                up.push(UpStage {
                    res: block,
                    attn,
                    upsample,
                });
            }
        }
        debug_assert!(skips.is_empty());
        let out_norm = GroupNorm::new(store, "out_norm", ch)?;
        let out_conv = Conv2d::with_scale(store, "out_conv", ch, config.out_channels, 3, 1, OUTPUT_INIT_SCALE)?;
        Ok(Self {
            config: config.clone(),
            input_conv,
            noise_mlp,
            audio_mlp,
            down,
            downsamplers,
            mid_first,
            mid_attn,
            mid_second,
            up,
            out_norm,
            out_conv,
            device: store.device().clone(),
            dtype: store.dtype(),
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Noise trunk embedding, `[B, 4·inner]`.
    pub fn embed_noise_level(&self, alpha_bars: &[f64]) -> Result<Tensor> {
        let feats = sinusoidal_noise_features(alpha_bars, self.config.inner_channels, &self.device, self.dtype)?;
        self.noise_mlp.forward(&feats)
    }

    /// Audio trunk embedding from `[B, 5, 256]` (or flattened `[B, 1280]`) windows.
    pub fn embed_audio(&self, audio: &Tensor) -> Result<Tensor> {
        let b = audio.dim(0)?;
        let flat = match audio.dims() {
            [_, r, m] if *r == WINDOW_ROWS && *m == N_MELS => audio.reshape((b, WINDOW_ROWS * N_MELS))?,
            [_, d] if *d == WINDOW_ROWS * N_MELS => audio.clone(),
            dims => return Err(invalid!("audio window must be [B, {WINDOW_ROWS}, {N_MELS}], got {dims:?}")),
        };
        self.audio_mlp.forward(&flat.to_dtype(self.dtype)?)
    }

    /// Predicted noise `[B, 3, S, S]` for stacked inputs `[B, C_in, S, S]`.
    pub fn forward(&self, x: &Tensor, audio: &Tensor, alpha_bars: &[f64], mode: &mut Mode<'_>) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.config.in_channels {
            return Err(invalid!("model expects {} input channels, got {c}", self.config.in_channels));
        }
        let factor = 1usize << (self.config.channel_multiples.len() - 1);
        if h != w || h % factor != 0 {
            return Err(invalid!("input must be square with side divisible by {factor}, got {h}x{w}"));
        }
        if audio.dim(0)? != b || alpha_bars.len() != b {
            return Err(invalid!("batch sizes of image, audio and noise level disagree"));
        }
        let temb = self.embed_noise_level(alpha_bars)?;
        let zemb = self.embed_audio(audio)?;
        let x = x.to_dtype(self.dtype)?;

        let mut h = self.input_conv.forward(&x)?;
        let mut skips = vec![h.clone()];
        for (stage, downsample) in self.down.iter().zip(&self.downsamplers) {
            h = stage.res.forward(&h, &temb, &zemb, mode)?;
            if let Some(attn) = &stage.attn {
                h = attn.forward(&h)?;
            }
            skips.push(h.clone());
            if let Some(conv) = downsample {
                h = conv.forward(&h)?;
                skips.push(h.clone());
            }
        }
        h = self.mid_first.forward(&h, &temb, &zemb, mode)?;
        h = self.mid_attn.forward(&h)?;
        h = self.mid_second.forward(&h, &temb, &zemb, mode)?;
        for stage in &self.up {
            let skip = skips.pop().expect("skip stack matches the up path");
            h = Tensor::cat(&[&h, &skip], 1)?;
            h = stage.res.forward(&h, &temb, &zemb, mode)?;
            if let Some(attn) = &stage.attn {
                h = attn.forward(&h)?;
            }
            if let Some(conv) = &stage.upsample {
                h = conv.forward(&upsample_nearest2x(&h)?)?;
            }
        }
        let h = self.out_norm.forward(&h)?.silu()?;
        self.out_conv.forward(&h)
    }

    /// Single-example convenience wrapper returning the predicted noise image.
    pub fn predict_noise(&self, input: &ConditioningInput, z: &AudioWindow, alpha_bar: f64) -> Result<Image> {
        let x = input.stack().to_tensor(&self.device, self.dtype)?;
        let audio = Tensor::from_slice(z.values(), (1, WINDOW_ROWS, N_MELS), &self.device)?;
        let out = self.forward(&x, &audio, &[alpha_bar], &mut Mode::Eval)?;
        Image::from_tensor(&out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
    }

    fn tiny(image_size: usize, in_channels: usize) -> UNetConfig {
        UNetConfig {
            image_size,
            in_channels,
            inner_channels: 8,
            channel_multiples: vec![1, 2],
            head_channels: 8,
            ..UNetConfig::desk(image_size)
        }
    }

    fn cond(c: usize, zs: f64, zb: f64, ts: f64, tb: f64) -> FilmCondition {
        let full = |v: f64| Tensor::full(v, (1, c), &Device::Cpu).unwrap();
        FilmCondition {
            audio_scale: full(zs),
            audio_bias: full(zb),
            noise_scale: full(ts),
            noise_bias: full(tb),
        }
    }

    #[test]
    fn film_identity_and_zero_scale() {
        let h = random(&[1, 8, 4, 4], 1, DType::F64);
        let gn = group_norm(&h, group_count(8)).unwrap();
        let id = film(&h, &cond(8, 1.0, 0.0, 1.0, 0.0)).unwrap();
        assert_eq!(id.flatten_all().unwrap().to_vec1::<f64>().unwrap(), gn.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        let gated = film(&h, &cond(8, 0.0, 0.7, 1.3, 0.2)).unwrap();
        for v in gated.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert_eq!(v, 0.7);
        }
        assert!(film(&h, &cond(4, 1.0, 0.0, 1.0, 0.0)).is_err());
    }

    #[test]
    fn film_is_linear_in_noise_scale() {
        let h = random(&[1, 8, 4, 4], 2, DType::F64);
        let ts = random(&[1, 8], 3, DType::F64);
        let tb = random(&[1, 8], 4, DType::F64);
        let make = |scale: &Tensor| FilmCondition {
            audio_scale: Tensor::ones((1, 8), DType::F64, &Device::Cpu).unwrap(),
            audio_bias: Tensor::zeros((1, 8), DType::F64, &Device::Cpu).unwrap(),
            noise_scale: scale.clone(),
            noise_bias: tb.clone(),
        };
        let one = film(&h, &make(&ts)).unwrap();
        let two = film(&h, &make(&(&ts * 2.0).unwrap())).unwrap();
        let diff = (two - (one * 2.0).unwrap()).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn noise_embedding_contract() {
        let mut store = ParamStore::new(0, &Device::Cpu, DType::F32);
        let cfg = UNetConfig::multi_speaker();
        let model = UNet::new(&UNetConfig { image_size: 32, ..cfg }, &mut store).unwrap();
        let e = model.embed_noise_level(&[0.3]).unwrap();
        assert_eq!(e.dims(), &[1, 256]);
        assert_eq!(
            e.to_vec2::<f32>().unwrap(),
            model.embed_noise_level(&[0.3]).unwrap().to_vec2::<f32>().unwrap()
        );
        for bad in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(model.embed_noise_level(&[bad]).is_err());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a: Vec<f64> = (0..1000).map(|_| rng.random_range(1e-4..0.9999)).collect();
        let b: Vec<f64> = (0..1000).map(|_| rng.random_range(1e-4..0.9999)).collect();
        let ea = sinusoidal_noise_features(&a, 64, &Device::Cpu, DType::F64).unwrap().to_vec2::<f64>().unwrap();
        let eb = sinusoidal_noise_features(&b, 64, &Device::Cpu, DType::F64).unwrap().to_vec2::<f64>().unwrap();
        for i in 0..1000 {
            if a[i] != b[i] {
                assert_ne!(ea[i], eb[i]);
            }
        }
    }

    #[test]
    fn audio_embedding_contract() {
        let mut store = ParamStore::new(0, &Device::Cpu, DType::F32);
        let model = UNet::new(&tiny(32, 9), &mut store).unwrap();
        let silence = Tensor::full(LOG_SILENCE, (1, WINDOW_ROWS, N_MELS), &Device::Cpu).unwrap();
        let e1 = model.embed_audio(&silence).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(e1, model.embed_audio(&silence).unwrap().to_vec2::<f32>().unwrap());
        assert_eq!(e1[0].len(), 32);
        let mut v = vec![LOG_SILENCE; WINDOW_ROWS * N_MELS];
        v[300] += 1.0;
        let other = Tensor::from_vec(v, (1, WINDOW_ROWS, N_MELS), &Device::Cpu).unwrap();
        assert_ne!(e1, model.embed_audio(&other).unwrap().to_vec2::<f32>().unwrap());
        assert!(model.embed_audio(&Tensor::zeros((1, 4, 256), DType::F32, &Device::Cpu).unwrap()).is_err());
    }

    const LOG_SILENCE: f32 = -11.512925;

    #[test]
    fn output_shape_and_channel_modes() {
        for (size, in_ch) in [(32, 9), (32, 10), (64, 9)] {
            let mut store = ParamStore::new(1, &Device::Cpu, DType::F32);
            let model = UNet::new(&tiny(size, in_ch), &mut store).unwrap();
            let x = random(&[2, in_ch, size, size], 5, DType::F32);
            let z = random(&[2, WINDOW_ROWS, N_MELS], 6, DType::F32);
            let y = model.forward(&x, &z, &[0.2, 0.9], &mut Mode::Eval).unwrap();
            assert_eq!(y.dims(), &[2, 3, size, size]);
        }
        let mut store = ParamStore::new(1, &Device::Cpu, DType::F32);
        let model = UNet::new(&tiny(32, 9), &mut store).unwrap();
        let x = random(&[1, 10, 32, 32], 5, DType::F32);
        let z = random(&[1, WINDOW_ROWS, N_MELS], 6, DType::F32);
        assert!(model.forward(&x, &z, &[0.5], &mut Mode::Eval).is_err());
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let cfg = UNetConfig { dropout: 0.3, ..tiny(32, 9) };
        let mut store = ParamStore::new(2, &Device::Cpu, DType::F32);
        let model = UNet::new(&cfg, &mut store).unwrap();
        let x = random(&[1, 9, 32, 32], 7, DType::F32);
        let z = random(&[1, WINDOW_ROWS, N_MELS], 8, DType::F32);
        let a = model.forward(&x, &z, &[0.4], &mut Mode::Eval).unwrap();
        let b = model.forward(&x, &z, &[0.4], &mut Mode::Eval).unwrap();
        assert_eq!(a.flatten_all().unwrap().to_vec1::<f32>().unwrap(), b.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = model.forward(&x, &z, &[0.4], &mut Mode::Train(&mut rng)).unwrap();
        assert_ne!(a.flatten_all().unwrap().to_vec1::<f32>().unwrap(), c.flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }

    #[test]
    fn same_seed_same_weights() {
        let mut s1 = ParamStore::new(9, &Device::Cpu, DType::F32);
        let mut s2 = ParamStore::new(9, &Device::Cpu, DType::F32);
        UNet::new(&tiny(32, 9), &mut s1).unwrap();
        UNet::new(&tiny(32, 9), &mut s2).unwrap();
        for ((n1, t1), (n2, t2)) in s1.tensors().iter().zip(s2.tensors().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(
                t1.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                t2.flatten_all().unwrap().to_vec1::<f32>().unwrap()
            );
        }
    }

    #[test]
    fn config_validation() {
        assert!(UNetConfig::single_speaker().validate().is_ok());
        assert!(UNetConfig::multi_speaker().validate().is_ok());
        let bad = [
            UNetConfig { in_channels: 8, ..tiny(32, 9) },
            UNetConfig { channel_multiples: vec![], ..tiny(32, 9) },
            UNetConfig { channel_multiples: vec![2, 1], ..tiny(32, 9) },
            UNetConfig { attention_resolutions: vec![24], ..tiny(32, 9) },
            UNetConfig { attention_resolutions: vec![64], ..tiny(32, 9) },
            UNetConfig { image_size: 31, ..tiny(32, 9) },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }
}
