use candle_core::{Device, Module, Tensor, Var, D};
use candle_nn::{Init, VarBuilder};

use super::params::ParamStore;
use crate::error::Result;

/// Layer normalization over the last dimension, built from differentiable
/// primitives.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            weight: vb.get_with_hints(dim, "weight", Init::Const(1.0))?,
            bias: vb.get_with_hints(dim, "bias", Init::Const(0.0))?,
            eps: 1e-6,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)
    }
}

/// Spatial batch normalization whose running statistics live in the
/// [`ParamStore`] so they are checkpointed with the weights.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(channels: usize, store: &ParamStore, vb: VarBuilder) -> Result<Self> {
        let prefix = vb.prefix();
        Ok(Self {
            weight: vb.get_with_hints(channels, "weight", Init::Const(1.0))?,
            bias: vb.get_with_hints(channels, "bias", Init::Const(0.0))?,
            running_mean: store.var(
                &format!("{prefix}.running_mean"),
                channels,
                Init::Const(0.0),
            )?,
            running_var: store.var(&format!("{prefix}.running_var"), channels, Init::Const(1.0))?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let c = x.dim(1)?;
        let (mean, var) = if train {
            let (b, _, h, w) = x.dims4()?;
            let n = (b * h * w) as f64;
            let flat = x.transpose(0, 1)?.flatten_from(1)?;
            let mean = flat.mean_keepdim(1)?;
            let var = flat.broadcast_sub(&mean)?.sqr()?.mean_keepdim(1)?;
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                + (mean.flatten_all()?.detach() * m)?)?;
            let unbiased = (var.flatten_all()?.detach() * (n / (n - 1.0).max(1.0)))?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean.reshape((1, c, 1, 1))?, var.reshape((1, c, 1, 1))?)
        } else {
            (
                self.running_mean.as_detached_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_detached_tensor().reshape((1, c, 1, 1))?,
            )
        };
        x.broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)
    }
}

/// Per-sample, per-channel normalization over the spatial dimensions (no affine).
pub fn instance_norm(x: &Tensor) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    centered
        .broadcast_div(&(var + 1e-5)?.sqrt()?)?
        .reshape((b, c, h, w))
}

fn reflect_indices(n: usize, pad: usize, device: &Device) -> candle_core::Result<Tensor> {
    let idx: Vec<u32> = (-(pad as i64)..(n + pad) as i64)
        .map(|i| {
            let r = if i < 0 {
                -i
            } else if i >= n as i64 {
                2 * (n as i64 - 1) - i
            } else {
                i
            };
            r as u32
        })
        .collect();
    Tensor::from_vec(idx, n + 2 * pad, device)
}

/// Mirror padding of the two spatial dimensions (edge pixel not repeated).
pub fn reflect_pad2d(x: &Tensor, pad: usize) -> candle_core::Result<Tensor> {
    if pad == 0 {
        return Ok(x.clone());
    }
    let (_, _, h, w) = x.dims4()?;
    let x = x.index_select(&reflect_indices(w, pad, x.device())?, 3)?;
    x.index_select(&reflect_indices(h, pad, x.device())?, 2)
}

/// `out × in` interpolation weights for half-pixel-centre bilinear resizing.
pub fn bilinear_matrix(input: usize, output: usize) -> Vec<f32> {
    let scale = input as f64 / output as f64;
    let mut m = vec![0.0f32; output * input];
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let l1 = src - i0 as f64;
        m[o * input + i0] += (1.0 - l1) as f32;
        m[o * input + i1] += l1 as f32;
    }
    m
}

/// Bilinear resize of `(B, C, h, w)` to `(B, C, H, W)` as two matrix products,
/// so it is differentiable.
#[derive(Debug, Clone)]
pub struct Upsampler {
    rows: Tensor,
    cols_t: Tensor,
    out_h: usize,
    out_w: usize,
}

impl Upsampler {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize, device: &Device) -> Result<Self> {
        let rows = Tensor::from_vec(bilinear_matrix(in_h, out_h), (out_h, in_h), device)?;
        let cols_t = Tensor::from_vec(bilinear_matrix(in_w, out_w), (out_w, in_w), device)?.t()?.contiguous()?;
        Ok(Self {
            rows,
            cols_t,
            out_h,
            out_w,
        })
    }
}

impl Module for Upsampler {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let rows = self.rows.to_dtype(x.dtype())?;
        let cols_t = self.cols_t.to_dtype(x.dtype())?;
        let flat = x.reshape((b * c, h, w))?;
        let y = rows.broadcast_matmul(&flat)?.broadcast_matmul(&cols_t)?;
        y.reshape((b, c, self.out_h, self.out_w))
    }
}

/// 3×3 stride-2 max pooling with one pixel of padding, built from strided
/// views so it can be differentiated. Inputs must be non-negative (the padding
/// is zero) with even spatial sides.
pub fn max_pool_3x3_s2(x: &Tensor) -> candle_core::Result<Tensor> {
    let x = pool_axis(x, 2)?;
    pool_axis(&x, 3)
}

fn pool_axis(x: &Tensor, dim: usize) -> candle_core::Result<Tensor> {
    let n = x.dim(dim)?;
    let out = n / 2;
    let padded = x.pad_with_zeros(dim, 1, 1)?;
    let mut dims = padded.dims().to_vec();
    dims[dim] = out;
    dims.insert(dim + 1, 2);
    let mut acc: Option<Tensor> = None;
    for offset in 0..3 {
        let taps = padded
            .narrow(dim, offset, 2 * out)?
            .reshape(dims.as_slice())?
            .narrow(dim + 1, 0, 1)?
            .squeeze(dim + 1)?;
        acc = Some(match acc {
            Some(a) => a.maximum(&taps)?,
            None => taps,
        });
    }
    Ok(acc.expect("three taps"))
}

pub fn upsample_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let up = Upsampler::new(h, w, out_h, out_w, x.device())?;
    Ok(up.forward(x)?)
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strided_max_pool_matches_reference() {
        let x = Tensor::rand(0f32, 1f32, (2, 3, 16, 12), &Device::Cpu).unwrap();
        let ours = max_pool_3x3_s2(&x).unwrap();
        let reference = x
            .pad_with_zeros(2, 1, 1)
            .unwrap()
            .pad_with_zeros(3, 1, 1)
            .unwrap()
            .max_pool2d_with_stride(3, 2)
            .unwrap();
        assert_eq!(ours.dims(), &[2, 3, 8, 6]);
        let diff: f32 = (ours - reference).unwrap().abs().unwrap().sum_all().unwrap().to_scalar().unwrap();
        assert_eq!(diff, 0.0);
        let v = Var::from_tensor(&x).unwrap();
        let g = max_pool_3x3_s2(v.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        assert!(g.get(v.as_tensor()).is_some());
    }

    #[test]
    fn bilinear_rows_sum_to_one() {
        for (i, o) in [(4, 64), (16, 256), (5, 7)] {
            let m = bilinear_matrix(i, o);
            for r in m.chunks(i) {
                assert!((r.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn bilinear_matches_half_pixel_convention() {
        // 2 -> 4: output centres map to -0.25 (clamped), 0.25, 0.75, 1.25.
        let x = Tensor::new(&[[[[0.0f32, 1.0]]]], &Device::Cpu).unwrap();
        let y = upsample_bilinear(&x, 1, 4).unwrap();
        let v: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(v, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn reflect_pad_mirrors() {
        let x = Tensor::new(&[[[[1.0f32, 2.0, 3.0]]]], &Device::Cpu).unwrap();
        let x = x.broadcast_as((1, 1, 3, 3)).unwrap().contiguous().unwrap();
        let y = reflect_pad2d(&x, 2).unwrap();
        assert_eq!(y.dims(), &[1, 1, 7, 7]);
        let row: Vec<f32> = y.get(0).unwrap().get(0).unwrap().get(0).unwrap().to_vec1().unwrap();
        assert_eq!(row, vec![3.0, 2.0, 1.0, 2.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn instance_norm_zero_mean_unit_var() {
        let x = Tensor::arange(0f32, 32.0, &Device::Cpu).unwrap().reshape((1, 2, 4, 4)).unwrap();
        let y = instance_norm(&x).unwrap();
        let m: Vec<f32> = y.flatten_from(2).unwrap().mean(2).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(m.iter().all(|v| v.abs() < 1e-5));
    }

    #[test]
    fn batch_norm_updates_running_stats_only_in_train() {
        let store = ParamStore::new(0, &Device::Cpu);
        let bn = BatchNorm2d::new(2, &store, store.var_builder().pp("bn")).unwrap();
        let x = (Tensor::arange(0f32, 16.0, &Device::Cpu).unwrap().reshape((2, 2, 2, 2)).unwrap() * 1.0).unwrap();
        let before = store.checksum("bn").unwrap();
        bn.forward_t(&x, false).unwrap();
        assert_eq!(before, store.checksum("bn").unwrap());
        bn.forward_t(&x, true).unwrap();
        assert_ne!(before, store.checksum("bn").unwrap());
    }

    #[test]
    fn conv_transpose_gradient_matches_finite_difference() {
        // Guards the backward rule candle provides for strided transposed convs.
        let dev = Device::Cpu;
        let x = Var::from_tensor(
            &Tensor::arange(0f64, 18.0, &dev).unwrap().reshape((1, 2, 3, 3)).unwrap().affine(0.1, -0.4).unwrap(),
        )
        .unwrap();
        let k = Tensor::arange(0f64, 36.0, &dev).unwrap().reshape((2, 2, 3, 3)).unwrap().affine(0.05, -0.8).unwrap();
        let loss = |x: &Tensor| -> f64 {
            x.conv_transpose2d(&k, 1, 1, 2, 1).unwrap().sqr().unwrap().sum_all().unwrap().to_scalar().unwrap()
        };
        let y = x.as_tensor().conv_transpose2d(&k, 1, 1, 2, 1).unwrap();
        assert_eq!(y.dims(), &[1, 2, 6, 6]);
        let grads = y.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let g: Vec<f64> = grads.get(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let base: Vec<f64> = x.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        for i in [0, 4, 9, 17] {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[i] += 1e-5;
            minus[i] -= 1e-5;
            let fp = loss(&Tensor::from_vec(plus, (1, 2, 3, 3), &dev).unwrap());
            let fm = loss(&Tensor::from_vec(minus, (1, 2, 3, 3), &dev).unwrap());
            let fd = (fp - fm) / 2e-5;
            assert!((fd - g[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", g[i]);
        }
    }
}
