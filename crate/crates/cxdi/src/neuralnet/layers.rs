//! Layer primitives with hand-derived backward passes: generic 3D
//! convolution (covers both the 3x3x3 and the factorized 3x1x1 / 1x3x1 /
//! 1x1x3 kernels), leaky ReLU, per-sample channel normalization, 2x max
//! pooling and 2x nearest-neighbor upsampling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CxdiError, Result};

/// Channelled activation tensor, layout `x + nx*(y + ny*(z + nz*c))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, nx: usize, ny: usize, nz: usize) -> Self {
        Self {
            channels,
            nx,
            ny,
            nz,
            data: vec![0.0; channels * nx * ny * nz],
        }
    }

    #[inline]
    pub fn spatial_len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.spatial_len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.spatial_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.channels == other.channels
            && self.nx == other.nx
            && self.ny == other.ny
            && self.nz == other.nz
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    /// Cross-correlation with zero padding preserving the spatial extent.
    Conv {
        in_channels: usize,
        out_channels: usize,
        kx: usize,
        ky: usize,
        kz: usize,
    },
    LRelu,
    Relu,
    /// Per-sample, per-channel normalization over spatial dims with affine
    /// scale/shift.
    Norm { channels: usize },
    MaxPool2,
    Upsample2,
}

/// Optimizable state for one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Conv { kernel: Vec<f64>, bias: Vec<f64> },
    Norm { gamma: Vec<f64>, delta: Vec<f64> },
    None,
}

impl LayerParams {
    pub fn len(&self) -> usize {
        match self {
            LayerParams::Conv { kernel, bias } => kernel.len() + bias.len(),
            LayerParams::Norm { gamma, delta } => gamma.len() + delta.len(),
            LayerParams::None => 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Cached forward state needed by the backward pass.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Conv { input: Tensor },
    Act { input: Tensor },
    Norm { input: Tensor, mean: Vec<f64>, inv_std: Vec<f64> },
    MaxPool { argmax: Vec<usize>, in_shape: [usize; 4] },
    Upsample { in_shape: [usize; 4] },
}

pub const NORM_EPS: f64 = 1e-5;

fn conv_shape_check(spec: &LayerSpec, input: &Tensor) -> Result<(usize, usize, [usize; 3])> {
    if let LayerSpec::Conv {
        in_channels,
        out_channels,
        kx,
        ky,
        kz,
    } = spec
    {
        if input.channels != *in_channels {
            return Err(CxdiError::ShapeMismatch(format!(
                "conv expects {in_channels} input channels, got {}",
                input.channels
            )));
        }
        Ok((*in_channels, *out_channels, [*kx, *ky, *kz]))
    } else {
        Err(CxdiError::ShapeMismatch("not a conv layer".into()))
    }
}

#[inline]
fn kernel_index(in_c: usize, k: [usize; 3], oc: usize, ic: usize, dx: usize, dy: usize, dz: usize) -> usize {
    (((oc * in_c + ic) * k[2] + dz) * k[1] + dy) * k[0] + dx
}

/// Zero-padded cross-correlation plus bias. Parallel over output channels.
pub fn conv_forward(
    spec: &LayerSpec,
    kernel: &[f64],
    bias: &[f64],
    input: &Tensor,
) -> Result<Tensor> {
    let (in_c, out_c, k) = conv_shape_check(spec, input)?;
    let (nx, ny, nz) = (input.nx, input.ny, input.nz);
    let (ox, oy, oz) = (k[0] / 2, k[1] / 2, k[2] / 2);
    let spatial = nx * ny * nz;
    let mut out = Tensor::zeros(out_c, nx, ny, nz);

    out.data
        .par_chunks_exact_mut(spatial)
        .enumerate()
        .for_each(|(oc, out_ch)| {
            out_ch.fill(bias[oc]);
            for ic in 0..in_c {
                let in_ch = input.channel(ic);
                for dz in 0..k[2] {
                    for dy in 0..k[1] {
                        for dx in 0..k[0] {
                            let w = kernel[kernel_index(in_c, k, oc, ic, dx, dy, dz)];
                            if w == 0.0 {
                                continue;
                            }
                            // source offset for each output voxel
                            let sx = dx as isize - ox as isize;
                            let sy = dy as isize - oy as isize;
                            let sz = dz as isize - oz as isize;
                            let zlo = (-sz).max(0) as usize;
                            let zhi = (nz as isize - sz).min(nz as isize) as usize;
                            let ylo = (-sy).max(0) as usize;
                            let yhi = (ny as isize - sy).min(ny as isize) as usize;
                            let xlo = (-sx).max(0) as usize;
                            let xhi = (nx as isize - sx).min(nx as isize) as usize;
                            for z in zlo..zhi {
                                let src_z = (z as isize + sz) as usize;
                                for y in ylo..yhi {
                                    let src_y = (y as isize + sy) as usize;
                                    let out_row = (z * ny + y) * nx;
                                    let in_row = (src_z * ny + src_y) * nx;
                                    let src_x0 = (xlo as isize + sx) as usize;
                                    let dst = &mut out_ch[out_row + xlo..out_row + xhi];
                                    let src = &in_ch[in_row + src_x0..in_row + src_x0 + (xhi - xlo)];
                                    for (d, s) in dst.iter_mut().zip(src) {
                                        *d += w * s;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Exact reverse-mode of `conv_forward`: input gradient, kernel gradient,
/// bias gradient.
pub fn conv_backward(
    spec: &LayerSpec,
    kernel: &[f64],
    input: &Tensor,
    upstream: &Tensor,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (in_c, out_c, k) = conv_shape_check(spec, input)?;
    let (nx, ny, nz) = (input.nx, input.ny, input.nz);
    let (ox, oy, oz) = (k[0] / 2, k[1] / 2, k[2] / 2);
    let spatial = nx * ny * nz;

    // bias gradient: sum of upstream per output channel
    let grad_bias: Vec<f64> = (0..out_c)
        .map(|oc| upstream.channel(oc).iter().sum())
        .collect();

    // kernel gradient, parallel over output channels
    let mut grad_kernel = vec![0.0; kernel.len()];
    let per_oc = in_c * k[0] * k[1] * k[2];
    grad_kernel
        .par_chunks_exact_mut(per_oc)
        .enumerate()
        .for_each(|(oc, gk)| {
            let up = upstream.channel(oc);
            for ic in 0..in_c {
                let in_ch = input.channel(ic);
                for dz in 0..k[2] {
                    for dy in 0..k[1] {
                        for dx in 0..k[0] {
                            let sx = dx as isize - ox as isize;
                            let sy = dy as isize - oy as isize;
                            let sz = dz as isize - oz as isize;
                            let zlo = (-sz).max(0) as usize;
                            let zhi = (nz as isize - sz).min(nz as isize) as usize;
                            let ylo = (-sy).max(0) as usize;
                            let yhi = (ny as isize - sy).min(ny as isize) as usize;
                            let xlo = (-sx).max(0) as usize;
                            let xhi = (nx as isize - sx).min(nx as isize) as usize;
                            let mut acc = 0.0;
                            for z in zlo..zhi {
                                let src_z = (z as isize + sz) as usize;
                                for y in ylo..yhi {
                                    let src_y = (y as isize + sy) as usize;
                                    let up_row = (z * ny + y) * nx;
                                    let in_row = (src_z * ny + src_y) * nx;
                                    let src_x0 = (xlo as isize + sx) as usize;
                                    let u = &up[up_row + xlo..up_row + xhi];
                                    let s = &in_ch[in_row + src_x0..in_row + src_x0 + (xhi - xlo)];
                                    for (a, b) in u.iter().zip(s) {
                                        acc += a * b;
                                    }
                                }
                            }
                            gk[kernel_index(in_c, k, 0, ic, dx, dy, dz)] = acc;
                        }
                    }
                }
            }
        });

    // input gradient: correlation of upstream with the flipped kernel,
    // parallel over input channels
    let mut grad_input = Tensor::zeros(in_c, nx, ny, nz);
    grad_input
        .data
        .par_chunks_exact_mut(spatial)
        .enumerate()
        .for_each(|(ic, gin)| {
            for oc in 0..out_c {
                let up = upstream.channel(oc);
                for dz in 0..k[2] {
                    for dy in 0..k[1] {
                        for dx in 0..k[0] {
                            let w = kernel[kernel_index(in_c, k, oc, ic, dx, dy, dz)];
                            if w == 0.0 {
                                continue;
                            }
                            // input voxel q receives from output voxel q - (d - off)
                            let sx = ox as isize - dx as isize;
                            let sy = oy as isize - dy as isize;
                            let sz = oz as isize - dz as isize;
                            let zlo = (-sz).max(0) as usize;
                            let zhi = (nz as isize - sz).min(nz as isize) as usize;
                            let ylo = (-sy).max(0) as usize;
                            let yhi = (ny as isize - sy).min(ny as isize) as usize;
                            let xlo = (-sx).max(0) as usize;
                            let xhi = (nx as isize - sx).min(nx as isize) as usize;
                            for z in zlo..zhi {
                                let src_z = (z as isize + sz) as usize;
                                for y in ylo..yhi {
                                    let src_y = (y as isize + sy) as usize;
                                    let gin_row = (z * ny + y) * nx;
                                    let up_row = (src_z * ny + src_y) * nx;
                                    let src_x0 = (xlo as isize + sx) as usize;
                                    let dst = &mut gin[gin_row + xlo..gin_row + xhi];
                                    let src = &up[up_row + src_x0..up_row + src_x0 + (xhi - xlo)];
                                    for (d, s) in dst.iter_mut().zip(src) {
                                        *d += w * s;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });

    Ok((grad_input, grad_kernel, grad_bias))
}

pub fn lrelu_forward(input: &Tensor, slope: f64) -> Tensor {
    Tensor {
        channels: input.channels,
        nx: input.nx,
        ny: input.ny,
        nz: input.nz,
        data: input
            .data
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect(),
    }
}

pub fn lrelu_backward(input: &Tensor, upstream: &Tensor, slope: f64) -> Tensor {
    Tensor {
        channels: input.channels,
        nx: input.nx,
        ny: input.ny,
        nz: input.nz,
        data: input
            .data
            .iter()
            .zip(&upstream.data)
            .map(|(&x, &g)| if x > 0.0 { g } else { slope * g })
            .collect(),
    }
}

/// Per-sample, per-channel normalization over spatial dims:
/// (x - mu)/sqrt(var + eps) * gamma + delta.
pub fn norm_forward(
    input: &Tensor,
    gamma: &[f64],
    delta: &[f64],
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let m = input.spatial_len() as f64;
    let mut out = input.clone();
    let mut means = Vec::with_capacity(input.channels);
    let mut inv_stds = Vec::with_capacity(input.channels);
    for c in 0..input.channels {
        let ch = input.channel(c);
        let mean = ch.iter().sum::<f64>() / m;
        let var = ch.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m;
        let inv_std = 1.0 / (var + NORM_EPS).sqrt();
        let (g, d) = (gamma[c], delta[c]);
        for v in out.channel_mut(c) {
            *v = (*v - mean) * inv_std * g + d;
        }
        means.push(mean);
        inv_stds.push(inv_std);
    }
    (out, means, inv_stds)
}

/// Exact reverse-mode of `norm_forward`, including the mean/variance
/// dependence.
pub fn norm_backward(
    input: &Tensor,
    upstream: &Tensor,
    gamma: &[f64],
    mean: &[f64],
    inv_std: &[f64],
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let m = input.spatial_len() as f64;
    let mut grad_input = Tensor::zeros(input.channels, input.nx, input.ny, input.nz);
    let mut grad_gamma = vec![0.0; input.channels];
    let mut grad_delta = vec![0.0; input.channels];
    for c in 0..input.channels {
        let x = input.channel(c);
        let g = upstream.channel(c);
        let (mu, istd) = (mean[c], inv_std[c]);
        let mut sum_g = 0.0;
        let mut sum_g_xhat = 0.0;
        for (xi, gi) in x.iter().zip(g) {
            let xhat = (xi - mu) * istd;
            sum_g += gi;
            sum_g_xhat += gi * xhat;
        }
        grad_delta[c] = sum_g;
        grad_gamma[c] = sum_g_xhat;
        let scale = gamma[c] * istd;
        let mean_g = sum_g / m;
        let mean_g_xhat = sum_g_xhat / m;
        for ((xi, gi), out) in x.iter().zip(g).zip(grad_input.channel_mut(c)) {
            let xhat = (xi - mu) * istd;
            *out = scale * (gi - mean_g - xhat * mean_g_xhat);
        }
    }
    (grad_input, grad_gamma, grad_delta)
}

/// 2x2x2 max pooling with argmax routing.
pub fn maxpool2_forward(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if input.nx % 2 != 0 || input.ny % 2 != 0 || input.nz % 2 != 0 {
        return Err(CxdiError::OddExtent);
    }
    let (nx, ny, nz) = (input.nx / 2, input.ny / 2, input.nz / 2);
    let mut out = Tensor::zeros(input.channels, nx, ny, nz);
    let mut argmax = vec![0usize; out.data.len()];
    let in_spatial = input.spatial_len();
    for c in 0..input.channels {
        let ch = input.channel(c);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = (2 * x + dx)
                                    + input.nx * ((2 * y + dy) + input.ny * (2 * z + dz));
                                if ch[i] > best {
                                    best = ch[i];
                                    best_idx = i;
                                }
                            }
                        }
                    }
                    let o = x + nx * (y + ny * z);
                    out.channel_mut(c)[o] = best;
                    argmax[c * nx * ny * nz + o] = c * in_spatial + best_idx;
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2_backward(argmax: &[usize], in_shape: [usize; 4], upstream: &Tensor) -> Tensor {
    let [channels, nx, ny, nz] = in_shape;
    let mut grad = Tensor::zeros(channels, nx, ny, nz);
    for (o, &src) in argmax.iter().enumerate() {
        grad.data[src] += upstream.data[o];
    }
    grad
}

/// Nearest-neighbor 2x upsampling: each voxel replicated into a 2x2x2 block.
pub fn upsample2_forward(input: &Tensor) -> Tensor {
    let (nx, ny, nz) = (input.nx * 2, input.ny * 2, input.nz * 2);
    let mut out = Tensor::zeros(input.channels, nx, ny, nz);
    for c in 0..input.channels {
        let src = input.channel(c);
        let dst = out.channel_mut(c);
        for z in 0..nz {
            for y in 0..ny {
                let src_row = (z / 2 * input.ny + y / 2) * input.nx;
                let dst_row = (z * ny + y) * nx;
                for x in 0..nx {
                    dst[dst_row + x] = src[src_row + x / 2];
                }
            }
        }
    }
    out
}

/// Backward of replication: sum each 2x2x2 block.
pub fn upsample2_backward(in_shape: [usize; 4], upstream: &Tensor) -> Tensor {
    let [channels, nx, ny, nz] = in_shape;
    let mut grad = Tensor::zeros(channels, nx, ny, nz);
    for c in 0..channels {
        let up = upstream.channel(c);
        let g = grad.channel_mut(c);
        for z in 0..upstream.nz {
            for y in 0..upstream.ny {
                let up_row = (z * upstream.ny + y) * upstream.nx;
                let g_row = (z / 2 * ny + y / 2) * nx;
                for x in 0..upstream.nx {
                    g[g_row + x / 2] += up[up_row + x];
                }
            }
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(channels: usize, n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::zeros(channels, n, n, n);
        for v in t.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        t
    }

    #[test]
    fn conv_delta_kernel_is_identity_plus_bias() {
        let spec = LayerSpec::Conv {
            in_channels: 1,
            out_channels: 1,
            kx: 3,
            ky: 3,
            kz: 3,
        };
        let mut kernel = vec![0.0; 27];
        kernel[kernel_index(1, [3, 3, 3], 0, 0, 1, 1, 1)] = 1.0;
        let input = random_tensor(1, 4, 1);
        let out = conv_forward(&spec, &kernel, &[0.5], &input).unwrap();
        for (o, i) in out.data.iter().zip(&input.data) {
            assert!((o - (i + 0.5)).abs() < 1e-14);
        }
    }

    #[test]
    fn conv_ones_kernel_counts_taps() {
        let spec = LayerSpec::Conv {
            in_channels: 1,
            out_channels: 1,
            kx: 3,
            ky: 3,
            kz: 3,
        };
        let kernel = vec![1.0; 27];
        let n = 6;
        let input = Tensor {
            channels: 1,
            nx: n,
            ny: n,
            nz: n,
            data: vec![1.0; n * n * n],
        };
        let out = conv_forward(&spec, &kernel, &[2.0], &input).unwrap();
        // interior voxel sees all 27 taps, corner sees 8
        let interior = out.data[2 + n * (2 + n * 2)];
        assert_eq!(interior, 27.0 + 2.0);
        let corner = out.data[0];
        assert_eq!(corner, 8.0 + 2.0);
    }

    fn fd_conv_check(k: [usize; 3]) {
        let (in_c, out_c) = (2, 3);
        let spec = LayerSpec::Conv {
            in_channels: in_c,
            out_channels: out_c,
            kx: k[0],
            ky: k[1],
            kz: k[2],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ksize = in_c * out_c * k[0] * k[1] * k[2];
        let kernel: Vec<f64> = (0..ksize).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let bias: Vec<f64> = (0..out_c).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let input = random_tensor(in_c, 4, 8);
        let upstream = random_tensor(out_c, 4, 9);

        let loss = |kern: &[f64], b: &[f64], inp: &Tensor| -> f64 {
            let out = conv_forward(&spec, kern, b, inp).unwrap();
            out.data.iter().zip(&upstream.data).map(|(o, u)| o * u).sum()
        };
        let (gin, gk, gb) = conv_backward(&spec, &kernel, &input, &upstream).unwrap();

        let h = 1e-5;
        // input gradient probes
        for i in (0..input.data.len()).step_by(input.data.len() / 20 + 1) {
            let mut p = input.clone();
            p.data[i] += h;
            let mut m = input.clone();
            m.data[i] -= h;
            let fd = (loss(&kernel, &bias, &p) - loss(&kernel, &bias, &m)) / (2.0 * h);
            let scale = fd.abs().max(gin.data[i].abs()).max(1e-8);
            assert!((fd - gin.data[i]).abs() / scale < 1e-6, "input grad {i}");
        }
        // kernel gradient probes
        for i in (0..kernel.len()).step_by(kernel.len() / 20 + 1) {
            let mut p = kernel.clone();
            p[i] += h;
            let mut m = kernel.clone();
            m[i] -= h;
            let fd = (loss(&p, &bias, &input) - loss(&m, &bias, &input)) / (2.0 * h);
            let scale = fd.abs().max(gk[i].abs()).max(1e-8);
            assert!((fd - gk[i]).abs() / scale < 1e-6, "kernel grad {i}");
        }
        // bias gradient
        for i in 0..bias.len() {
            let mut p = bias.clone();
            p[i] += h;
            let mut m = bias.clone();
            m[i] -= h;
            let fd = (loss(&kernel, &p, &input) - loss(&kernel, &m, &input)) / (2.0 * h);
            let scale = fd.abs().max(gb[i].abs()).max(1e-8);
            assert!((fd - gb[i]).abs() / scale < 1e-6, "bias grad {i}");
        }
    }

    #[test]
    fn conv3_gradients_match_finite_differences() {
        fd_conv_check([3, 3, 3]);
    }

    #[test]
    fn factorized_conv_gradients_match_finite_differences() {
        fd_conv_check([3, 1, 1]);
        fd_conv_check([1, 3, 1]);
        fd_conv_check([1, 1, 3]);
    }

    #[test]
    fn lrelu_values_and_gradient() {
        let t = Tensor {
            channels: 1,
            nx: 4,
            ny: 4,
            nz: 4,
            data: {
                let mut d = vec![0.0; 64];
                d[0] = -1.0;
                d[1] = 2.0;
                d
            },
        };
        let out = lrelu_forward(&t, 0.01);
        assert_eq!(out.data[0], -0.01);
        assert_eq!(out.data[1], 2.0);
        let relu = lrelu_forward(&t, 0.0);
        assert_eq!(relu.data[0], 0.0);
        assert_eq!(relu.data[1], 2.0);
        let up = Tensor {
            channels: 1,
            nx: 4,
            ny: 4,
            nz: 4,
            data: vec![1.0; 64],
        };
        let g = lrelu_backward(&t, &up, 0.01);
        assert_eq!(g.data[0], 0.01);
        assert_eq!(g.data[1], 1.0);
    }

    #[test]
    fn norm_constant_channel_outputs_delta() {
        let t = Tensor {
            channels: 2,
            nx: 4,
            ny: 4,
            nz: 4,
            data: vec![3.0; 128],
        };
        let (out, _, _) = norm_forward(&t, &[1.0, 2.0], &[0.25, -0.5]);
        for v in out.channel(0) {
            assert!((v - 0.25).abs() < 1e-12);
        }
        for v in out.channel(1) {
            assert!((v + 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn norm_statistics_by_construction() {
        let t = random_tensor(2, 4, 3);
        let (out, _, _) = norm_forward(&t, &[2.0, 2.0], &[1.0, 1.0]);
        let m = out.spatial_len() as f64;
        for c in 0..2 {
            let ch = out.channel(c);
            let mean = ch.iter().sum::<f64>() / m;
            let var = ch.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m;
            assert!((mean - 1.0).abs() < 1e-10);
            assert!((var - 4.0).abs() < 0.05 * 4.0); // up to eps
        }
    }

    #[test]
    fn norm_gradient_matches_finite_differences() {
        let input = random_tensor(2, 4, 4);
        let upstream = random_tensor(2, 4, 5);
        let gamma = [1.3, 0.7];
        let delta = [0.2, -0.4];
        let loss = |inp: &Tensor, g: &[f64], d: &[f64]| -> f64 {
            let (out, _, _) = norm_forward(inp, g, d);
            out.data.iter().zip(&upstream.data).map(|(o, u)| o * u).sum()
        };
        let (_, mean, inv_std) = norm_forward(&input, &gamma, &delta);
        let (gin, gg, gd) = norm_backward(&input, &upstream, &gamma, &mean, &inv_std);
        let h = 1e-5;
        for i in (0..input.data.len()).step_by(5) {
            let mut p = input.clone();
            p.data[i] += h;
            let mut m = input.clone();
            m.data[i] -= h;
            let fd = (loss(&p, &gamma, &delta) - loss(&m, &gamma, &delta)) / (2.0 * h);
            let scale = fd.abs().max(gin.data[i].abs()).max(1e-8);
            assert!((fd - gin.data[i]).abs() / scale < 1e-5, "input grad {i}");
        }
        for c in 0..2 {
            let mut gp = gamma;
            gp[c] += h;
            let mut gm = gamma;
            gm[c] -= h;
            let fd = (loss(&input, &gp, &delta) - loss(&input, &gm, &delta)) / (2.0 * h);
            assert!((fd - gg[c]).abs() / fd.abs().max(1e-8) < 1e-6);
            let mut dp = delta;
            dp[c] += h;
            let mut dm = delta;
            dm[c] -= h;
            let fd = (loss(&input, &gamma, &dp) - loss(&input, &gamma, &dm)) / (2.0 * h);
            assert!((fd - gd[c]).abs() / fd.abs().max(1e-8) < 1e-6);
        }
    }

    #[test]
    fn pool_and_upsample_shapes_and_conservation() {
        let t = random_tensor(2, 8, 6);
        let (pooled, argmax) = maxpool2_forward(&t).unwrap();
        assert_eq!((pooled.nx, pooled.ny, pooled.nz), (4, 4, 4));
        let up = upsample2_forward(&pooled);
        assert_eq!((up.nx, up.ny, up.nz), (8, 8, 8));

        // constant volume: upsample(maxpool(x)) = x
        let c = Tensor {
            channels: 1,
            nx: 4,
            ny: 4,
            nz: 4,
            data: vec![7.0; 64],
        };
        let (pc, _) = maxpool2_forward(&c).unwrap();
        let uc = upsample2_forward(&pc);
        assert_eq!(uc.data, c.data);

        // gradient conservation through the pool
        let upstream = random_tensor(2, 4, 7);
        let g = maxpool2_backward(&argmax, [2, 8, 8, 8], &upstream);
        let sum_up: f64 = upstream.data.iter().sum();
        let sum_g: f64 = g.data.iter().sum();
        assert!((sum_up - sum_g).abs() < 1e-12);
        // routed only to argmax positions
        let nonzero = g.data.iter().filter(|&&v| v != 0.0).count();
        assert!(nonzero <= upstream.data.len());
    }

    #[test]
    fn pool_gradient_matches_finite_differences() {
        let input = random_tensor(1, 4, 10);
        let upstream = random_tensor(1, 2, 11);
        let loss = |inp: &Tensor| -> f64 {
            let (out, _) = maxpool2_forward(inp).unwrap();
            out.data.iter().zip(&upstream.data).map(|(o, u)| o * u).sum()
        };
        let (_, argmax) = maxpool2_forward(&input).unwrap();
        let g = maxpool2_backward(&argmax, [1, 4, 4, 4], &upstream);
        let h = 1e-5;
        for i in 0..input.data.len() {
            let mut p = input.clone();
            p.data[i] += h;
            let mut m = input.clone();
            m.data[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - g.data[i]).abs() < 1e-6, "pool grad {i}");
        }
    }

    #[test]
    fn upsample_gradient_matches_finite_differences() {
        let input = random_tensor(1, 2, 12);
        let upstream = random_tensor(1, 4, 13);
        let loss = |inp: &Tensor| -> f64 {
            upsample2_forward(inp)
                .data
                .iter()
                .zip(&upstream.data)
                .map(|(o, u)| o * u)
                .sum()
        };
        let g = upsample2_backward([1, 2, 2, 2], &upstream);
        let h = 1e-5;
        for i in 0..input.data.len() {
            let mut p = input.clone();
            p.data[i] += h;
            let mut m = input.clone();
            m.data[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - g.data[i]).abs() < 1e-6, "upsample grad {i}");
        }
    }

    #[test]
    fn odd_extent_rejected() {
        // channels*6^3 tensor pools fine; fake an odd extent
        let t = Tensor {
            channels: 1,
            nx: 3,
            ny: 4,
            nz: 4,
            data: vec![0.0; 48],
        };
        assert!(matches!(maxpool2_forward(&t), Err(CxdiError::OddExtent)));
    }
}
