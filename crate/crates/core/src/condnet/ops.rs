//! CPU kernels with hand-written backward passes for the two hot spots of
//! the U-Net: patch extraction for convolutions (so they run as one matmul)
//! and group normalization.

use candle_core::backend::BackendStorage;
use candle_core::{bail, CpuStorage, CustomOp1, CustomOp2, DType, Layout, Result, Shape, Tensor, WithDType};
use num_traits::Float;

fn contiguous<'a, T: WithDType>(storage: &'a CpuStorage, layout: &Layout) -> Result<&'a [T]> {
    let data = storage.as_slice::<T>()?;
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => bail!("custom op input must be contiguous"),
    }
}

/// Convolution patch geometry for an `[N, C, H, W]` input.
#[derive(Debug, Clone, Copy)]
pub struct PatchGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PatchGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Visits every in-bounds run of taps of one image as
    /// `(dst_offset, src_offset, len)`; consecutive destination elements are
    /// `stride` apart in the source.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let cols = oh * ow;
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    // ox range with 0 <= ox*s + kj - p < width
                    let lo = if p > kj { (p - kj).div_ceil(s) } else { 0 };
                    let Some(span) = (self.width + p).checked_sub(kj + 1) else {
                        continue;
                    };
                    let hi = (span / s + 1).min(ow);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * s + ki) as isize - p as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let src_row = (c * self.height + iy as usize) * self.width;
                        f(row * cols + oy * ow + lo, src_row + lo * s + kj - p, hi - lo);
                    }
                }
            }
        }
    }
}

/// `[N, C, H, W]` → `[N, C·k·k, H_out·W_out]`.
pub struct Im2Col(pub PatchGeometry);

/// Adjoint of [`Im2Col`]: scatters columns back onto the image grid.
pub struct Col2Im(pub PatchGeometry);

fn im2col<T: WithDType + Float>(g: &PatchGeometry, src: &[T], batch: usize) -> Vec<T> {
    let (rows, cols) = (g.rows(), g.cols());
    let img = g.channels * g.height * g.width;
    let mut out = vec![T::zero(); batch * rows * cols];
    for n in 0..batch {
        let s = &src[n * img..(n + 1) * img];
        let d = &mut out[n * rows * cols..(n + 1) * rows * cols];
        if g.stride == 1 {
            g.for_each_run(|di, si, len| d[di..di + len].copy_from_slice(&s[si..si + len]));
        } else {
            g.for_each_run(|di, si, len| {
                for j in 0..len {
                    d[di + j] = s[si + j * g.stride];
                }
            });
        }
    }
    out
}

fn col2im<T: WithDType + Float>(g: &PatchGeometry, src: &[T], batch: usize) -> Vec<T> {
    let (rows, cols) = (g.rows(), g.cols());
    let img = g.channels * g.height * g.width;
    let mut out = vec![T::zero(); batch * img];
    for n in 0..batch {
        let s = &src[n * rows * cols..(n + 1) * rows * cols];
        let d = &mut out[n * img..(n + 1) * img];
        g.for_each_run(|si, di, len| {
            for j in 0..len {
                let t = di + j * g.stride;
                d[t] = d[t] + s[si + j];
            }
        });
    }
    out
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let (n, c, h, w) = layout.shape().dims4()?;
        if (c, h, w) != (g.channels, g.height, g.width) {
            bail!("im2col: input [{n}, {c}, {h}, {w}] does not match the patch geometry");
        }
        let shape = Shape::from((n, g.rows(), g.cols()));
        let out = match storage.dtype() {
            DType::F32 => CpuStorage::F32(im2col(g, contiguous::<f32>(storage, layout)?, n)),
            DType::F64 => CpuStorage::F64(im2col(g, contiguous::<f64>(storage, layout)?, n)),
            dt => bail!("im2col: unsupported dtype {dt:?}"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let (n, rows, cols) = layout.shape().dims3()?;
        if (rows, cols) != (g.rows(), g.cols()) {
            bail!("col2im: input [{n}, {rows}, {cols}] does not match the patch geometry");
        }
        let shape = Shape::from((n, g.channels, g.height, g.width));
        let out = match storage.dtype() {
            DType::F32 => CpuStorage::F32(col2im(g, contiguous::<f32>(storage, layout)?, n)),
            DType::F64 => CpuStorage::F64(col2im(g, contiguous::<f64>(storage, layout)?, n)),
            dt => bail!("col2im: unsupported dtype {dt:?}"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&Im2Col(self.0))?))
    }
}

/// Affine-free group normalization of an `[N, C, ...]` tensor.
pub struct GroupNormOp {
    pub groups: usize,
    pub eps: f64,
}

struct GroupNormGrad {
    groups: usize,
    eps: f64,
}

fn group_stats<T: WithDType + Float>(x: &[T], eps: f64) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / n;
    let var = x
        .iter()
        .map(|v| {
            let d = v.to_f64().unwrap() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn group_norm_fwd<T: WithDType + Float>(x: &[T], groups_total: usize, eps: f64) -> Vec<T> {
    let len = x.len() / groups_total;
    let mut out = vec![T::zero(); x.len()];
    for g in 0..groups_total {
        let xs = &x[g * len..(g + 1) * len];
        let (mean, inv_std) = group_stats(xs, eps);
        for (o, v) in out[g * len..(g + 1) * len].iter_mut().zip(xs) {
            *o = T::from((v.to_f64().unwrap() - mean) * inv_std).unwrap();
        }
    }
    out
}

fn group_norm_bwd<T: WithDType + Float>(x: &[T], dy: &[T], groups_total: usize, eps: f64) -> Vec<T> {
    let len = x.len() / groups_total;
    let n = len as f64;
    let mut out = vec![T::zero(); x.len()];
    for g in 0..groups_total {
        let xs = &x[g * len..(g + 1) * len];
        let gs = &dy[g * len..(g + 1) * len];
        let (mean, inv_std) = group_stats(xs, eps);
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for (v, d) in xs.iter().zip(gs) {
            let xhat = (v.to_f64().unwrap() - mean) * inv_std;
            let d = d.to_f64().unwrap();
            sum_dy += d;
            sum_dy_xhat += d * xhat;
        }
        let (mean_dy, mean_dy_xhat) = (sum_dy / n, sum_dy_xhat / n);
        for ((o, v), d) in out[g * len..(g + 1) * len].iter_mut().zip(xs).zip(gs) {
            let xhat = (v.to_f64().unwrap() - mean) * inv_std;
            let dx = inv_std * (d.to_f64().unwrap() - mean_dy - xhat * mean_dy_xhat);
            *o = T::from(dx).unwrap();
        }
    }
    out
}

fn groups_total(shape: &Shape, groups: usize) -> Result<usize> {
    let dims = shape.dims();
    if dims.len() < 2 {
        bail!("group norm needs at least [N, C]");
    }
    if dims[1] % groups != 0 {
        bail!("group norm: {} channels not divisible by {groups} groups", dims[1]);
    }
    Ok(dims[0] * groups)
}

impl CustomOp1 for GroupNormOp {
    fn name(&self) -> &'static str {
        "group-norm"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let total = groups_total(layout.shape(), self.groups)?;
        let out = match storage.dtype() {
            DType::F32 => CpuStorage::F32(group_norm_fwd(contiguous::<f32>(storage, layout)?, total, self.eps)),
            DType::F64 => CpuStorage::F64(group_norm_fwd(contiguous::<f64>(storage, layout)?, total, self.eps)),
            dt => bail!("group norm: unsupported dtype {dt:?}"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        let grad = arg.contiguous()?.apply_op2_no_bwd(
            &grad_res.contiguous()?,
            &GroupNormGrad {
                groups: self.groups,
                eps: self.eps,
            },
        )?;
        Ok(Some(grad))
    }
}

impl CustomOp2 for GroupNormGrad {
    fn name(&self) -> &'static str {
        "group-norm-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        if l1.shape() != l2.shape() {
            bail!("group norm grad: shape mismatch");
        }
        let total = groups_total(l1.shape(), self.groups)?;
        let out = match s1.dtype() {
            DType::F32 => CpuStorage::F32(group_norm_bwd(
                contiguous::<f32>(s1, l1)?,
                contiguous::<f32>(s2, l2)?,
                total,
                self.eps,
            )),
            DType::F64 => CpuStorage::F64(group_norm_bwd(
                contiguous::<f64>(s1, l1)?,
                contiguous::<f64>(s2, l2)?,
                total,
                self.eps,
            )),
            dt => bail!("group norm grad: unsupported dtype {dt:?}"),
        };
        Ok((out, l1.shape().clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn seq_tensor(shape: (usize, usize, usize, usize)) -> Tensor {
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let data: Vec<f64> = (0..n).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
        Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn im2col_matmul_matches_reference_conv() {
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let x = seq_tensor((2, 3, 6, 5));
            let w = seq_tensor((4, 3, k, k));
            let reference = x.conv2d(&w, pad, stride, 1, 1).unwrap();
            let g = PatchGeometry {
                channels: 3,
                height: 6,
                width: 5,
                kernel: k,
                stride,
                padding: pad,
            };
            let cols = x.apply_op1(Im2Col(g)).unwrap();
            let out = w
                .reshape((4, 3 * k * k))
                .unwrap()
                .broadcast_matmul(&cols)
                .unwrap()
                .reshape((2, 4, g.out_height(), g.out_width()))
                .unwrap();
            let diff = (out - reference).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(diff < 1e-12, "k={k} s={stride}: {diff}");
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let g = PatchGeometry {
            channels: 2,
            height: 5,
            width: 4,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let x = seq_tensor((1, 2, 5, 4));
        let c = Tensor::from_vec(
            (0..g.rows() * g.cols()).map(|i| (i as f64).sin()).collect::<Vec<_>>(),
            (1, g.rows(), g.cols()),
            &Device::Cpu,
        )
        .unwrap();
        let lhs = (x.apply_op1(Im2Col(g)).unwrap() * &c).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        let rhs = (x * c.apply_op1(Col2Im(g)).unwrap()).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn group_norm_gradient_matches_finite_differences() {
        let x0 = seq_tensor((2, 4, 3, 3));
        let weights = seq_tensor((2, 4, 3, 3)).sin().unwrap();
        let op = || GroupNormOp { groups: 2, eps: 1e-5 };
        let var = Var::from_tensor(&x0).unwrap();
        let loss = (var.as_tensor().apply_op1(op()).unwrap() * &weights).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let analytic = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let base = x0.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let f = |v: &[f64]| -> f64 {
            let t = Tensor::from_slice(v, (2, 4, 3, 3), &Device::Cpu).unwrap();
            (t.apply_op1(op()).unwrap() * &weights).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
        };
        for i in [0, 7, 19, 40, 71] {
            let h = 1e-6;
            let mut p = base.clone();
            p[i] += h;
            let mut m = base.clone();
            m[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-6, "i={i}: fd {fd} vs {}", analytic[i]);
        }
    }
}
