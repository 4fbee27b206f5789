//! Dense 3D feature-map kernels used by the MedNeXt forward pass.
//!
//! Every output element is accumulated in a fixed order, so results do not
//! depend on how rayon splits the work.

use rayon::prelude::*;

use crate::volcore::{voxel_count, ChannelStack};

/// Output extent of a strided convolution with padding `k / 2`.
pub fn conv_out_extent(n: usize, k: usize, stride: usize) -> usize {
    (n + 2 * (k / 2) - k) / stride + 1
}

/// Depthwise `k³` convolution with zero padding `k / 2` and the given stride.
/// `weight` is `channels × k³` with kx fastest.
pub fn depthwise_conv(x: &ChannelStack, weight: &[f32], bias: &[f32], k: usize, stride: usize) -> ChannelStack {
    let c = x.channels;
    let pad = (k / 2) as isize;
    let [nx, ny, nz] = x.shape;
    let out_shape = x.shape.map(|n| conv_out_extent(n, k, stride));
    let [ox, oy, oz] = out_shape;
    let on = voxel_count(out_shape);
    let mut out = vec![0.0f32; c * on];
    let k3 = k * k * k;
    out.par_chunks_mut(on).enumerate().for_each(|(ch, dst)| {
        let src = x.channel(ch);
        let w = &weight[ch * k3..(ch + 1) * k3];
        dst.fill(bias[ch]);
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[kx + k * (ky + k * kz)];
                    if wv == 0.0 {
                        continue;
                    }
                    for z in 0..oz {
                        let iz = (z * stride) as isize + kz as isize - pad;
                        if iz < 0 || iz >= nz as isize {
                            continue;
                        }
                        for y in 0..oy {
                            let iy = (y * stride) as isize + ky as isize - pad;
                            if iy < 0 || iy >= ny as isize {
                                continue;
                            }
                            let srow = &src[nx * (iy as usize + ny * iz as usize)..][..nx];
                            let drow = &mut dst[ox * (y + oy * z)..][..ox];
                            for (xo, d) in drow.iter_mut().enumerate() {
                                let ix = (xo * stride) as isize + kx as isize - pad;
                                if ix >= 0 && ix < nx as isize {
                                    *d += wv * srow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    ChannelStack {
        channels: c,
        shape: out_shape,
        data: out,
    }
}

/// Depthwise stride-2 transposed `k³` convolution (padding `k / 2`), followed
/// by one voxel of zero padding at the low end of every axis, so an extent `n`
/// becomes `2n`.
pub fn depthwise_conv_transpose(x: &ChannelStack, weight: &[f32], bias: &[f32], k: usize) -> ChannelStack {
    let c = x.channels;
    let pad = (k / 2) as isize;
    let [nx, ny, nz] = x.shape;
    let out_shape = x.shape.map(|n| 2 * n);
    let [ox, oy, oz] = out_shape;
    let on = voxel_count(out_shape);
    let k3 = k * k * k;
    let mut out = vec![0.0f32; c * on];
    out.par_chunks_mut(on).enumerate().for_each(|(ch, dst)| {
        let src = x.channel(ch);
        let w = &weight[ch * k3..(ch + 1) * k3];
        // Gather form: transposed-conv output o (before the shift) receives
        // input i through tap t when 2i - pad + t == o.
        for z in 1..oz {
            let o_z = (z - 1) as isize;
            for y in 1..oy {
                let o_y = (y - 1) as isize;
                let drow = &mut dst[ox * (y + oy * z)..][..ox];
                for (x_, d) in drow.iter_mut().enumerate().skip(1) {
                    let o_x = (x_ - 1) as isize;
                    let mut acc = bias[ch];
                    for kz in 0..k {
                        let t = o_z + pad - kz as isize;
                        if t < 0 || t % 2 != 0 || t / 2 >= nz as isize {
                            continue;
                        }
                        let iz = (t / 2) as usize;
                        for ky in 0..k {
                            let t = o_y + pad - ky as isize;
                            if t < 0 || t % 2 != 0 || t / 2 >= ny as isize {
                                continue;
                            }
                            let iy = (t / 2) as usize;
                            for kx in 0..k {
                                let t = o_x + pad - kx as isize;
                                if t < 0 || t % 2 != 0 || t / 2 >= nx as isize {
                                    continue;
                                }
                                acc += w[kx + k * (ky + k * kz)] * src[t as usize / 2 + nx * (iy + ny * iz)];
                            }
                        }
                    }
                    *d = acc;
                }
            }
        }
    });
    ChannelStack {
        channels: c,
        shape: out_shape,
        data: out,
    }
}

/// 1×1×1 convolution; `weight` is `out × in`, row-major.
pub fn pointwise_conv(x: &ChannelStack, weight: &[f32], bias: &[f32], out_channels: usize) -> ChannelStack {
    let n = x.voxels();
    let cin = x.channels;
    let mut out = vec![0.0f32; out_channels * n];
    out.par_chunks_mut(n).enumerate().for_each(|(o, dst)| {
        dst.fill(bias[o]);
        for i in 0..cin {
            let w = weight[o * cin + i];
            if w == 0.0 {
                continue;
            }
            for (d, s) in dst.iter_mut().zip(x.channel(i)) {
                *d += w * s;
            }
        }
    });
    ChannelStack {
        channels: out_channels,
        shape: x.shape,
        data: out,
    }
}

/// Keeps every second voxel starting at the origin along each axis.
pub fn subsample2(x: &ChannelStack) -> ChannelStack {
    let [nx, ny, nz] = x.shape;
    let out_shape = x.shape.map(|n| n.div_ceil(2));
    let mut data = Vec::with_capacity(x.channels * voxel_count(out_shape));
    for c in 0..x.channels {
        let src = x.channel(c);
        for z in (0..nz).step_by(2) {
            for y in (0..ny).step_by(2) {
                data.extend(src[nx * (y + ny * z)..][..nx].iter().step_by(2));
            }
        }
    }
    ChannelStack {
        channels: x.channels,
        shape: out_shape,
        data,
    }
}

/// Stride-2 1×1×1 transposed convolution with the same low-end padding as
/// [`depthwise_conv_transpose`]: voxel `2i + 1` gets `W x[i] + b`, other
/// interior voxels get `b`, and the padded low faces are zero.
pub fn pointwise_conv_transpose(x: &ChannelStack, weight: &[f32], bias: &[f32], out_channels: usize) -> ChannelStack {
    let y = pointwise_conv(x, weight, bias, out_channels);
    let [nx, ny, _] = x.shape;
    let out_shape = x.shape.map(|n| 2 * n);
    let [ox, oy, oz] = out_shape;
    let on = voxel_count(out_shape);
    let mut out = vec![0.0f32; out_channels * on];
    out.par_chunks_mut(on).enumerate().for_each(|(o, dst)| {
        let src = y.channel(o);
        for z in 1..oz {
            for yy in 1..oy {
                for x_ in 1..ox {
                    let hit = z % 2 == 1 && yy % 2 == 1 && x_ % 2 == 1;
                    dst[x_ + ox * (yy + oy * z)] = if hit {
                        src[(x_ / 2) + nx * ((yy / 2) + ny * (z / 2))]
                    } else {
                        bias[o]
                    };
                }
            }
        }
    });
    ChannelStack {
        channels: out_channels,
        shape: out_shape,
        data: out,
    }
}

/// Per-channel normalization (one group per channel), biased variance.
pub fn channel_norm(x: &mut ChannelStack, gamma: &[f32], beta: &[f32], eps: f64) {
    let n = x.voxels();
    x.data.par_chunks_mut(n).enumerate().for_each(|(c, ch)| {
        let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let scale = gamma[c] as f64 / (var + eps).sqrt();
        let shift = beta[c] as f64 - mean * scale;
        ch.iter_mut().for_each(|v| *v = (*v as f64 * scale + shift) as f32);
    });
}

/// Exact (erf) GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// d/dx of [`gelu`].
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn gelu_inplace(x: &mut ChannelStack) {
    x.data.par_iter_mut().for_each(|v| *v = gelu(*v as f64) as f32);
}

pub fn add_inplace(x: &mut ChannelStack, other: &ChannelStack) {
    debug_assert_eq!(x.data.len(), other.data.len());
    x.data.par_iter_mut().zip(other.data.par_iter()).for_each(|(a, b)| *a += b);
}
