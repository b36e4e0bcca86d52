//! Dense 3D layers on channel-major tensors, inference only.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::Grid3;

/// `channels × D × H × W` tensor; each channel is stored x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub channels: usize,
    /// Spatial shape `[nx, ny, nz]`.
    pub shape: [usize; 3],
    pub data: Vec<f32>,
}

impl Tensor4 {
    pub fn zeros(channels: usize, shape: [usize; 3]) -> Self {
        Self {
            channels,
            shape,
            data: vec![0.0; channels * shape.iter().product::<usize>()],
        }
    }

    pub fn new(channels: usize, shape: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let want = channels * shape.iter().product::<usize>();
        if data.len() != want {
            return Err(Error::Shape(format!(
                "tensor {channels}x{shape:?} needs {want} values, got {}",
                data.len()
            )));
        }
        Ok(Self { channels, shape, data })
    }

    pub fn from_grid(grid: &Grid3) -> Self {
        Self {
            channels: 1,
            shape: grid.shape,
            data: grid.data.clone(),
        }
    }

    pub fn into_grid(self) -> Result<Grid3> {
        if self.channels != 1 {
            return Err(Error::Shape(format!("expected 1 channel, have {}", self.channels)));
        }
        Grid3::new(self.shape, self.data)
    }

    pub fn voxels_per_channel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels_per_channel();
        &self.data[c * n..(c + 1) * n]
    }
}

/// Zero-padded, stride-1, same-size cross-correlation with an odd cubic
/// kernel. `weights` is laid out `[c_out][c_in][kz][ky][kx]`.
pub fn conv3d(input: &Tensor4, weights: &[f32], bias: &[f32], c_out: usize, kernel: usize) -> Result<Tensor4> {
    if kernel % 2 == 0 {
        return Err(Error::Shape(format!("kernel size {kernel} must be odd")));
    }
    let c_in = input.channels;
    let k3 = kernel * kernel * kernel;
    if weights.len() != c_out * c_in * k3 {
        return Err(Error::Shape(format!(
            "conv weights: expected {c_out}x{c_in}x{kernel}^3 = {}, got {}",
            c_out * c_in * k3,
            weights.len()
        )));
    }
    if bias.len() != c_out {
        return Err(Error::Shape(format!("conv bias: expected {c_out}, got {}", bias.len())));
    }
    let [nx, ny, nz] = input.shape;
    let n = nx * ny * nz;
    let pad = (kernel / 2) as isize;
    let mut out = Tensor4::zeros(c_out, input.shape);

    out.data.par_chunks_mut(n).enumerate().for_each(|(co, dst)| {
        dst.fill(bias[co]);
        for ci in 0..c_in {
            let src = input.channel(ci);
            let w = &weights[(co * c_in + ci) * k3..(co * c_in + ci + 1) * k3];
            for kz in 0..kernel {
                let dz = kz as isize - pad;
                for ky in 0..kernel {
                    let dy = ky as isize - pad;
                    for kx in 0..kernel {
                        let dx = kx as isize - pad;
                        let wv = w[(kz * kernel + ky) * kernel + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (nx as isize - dx).min(nx as isize).max(0) as usize;
                        if x0 >= x1 {
                            continue;
                        }
                        for z in 0..nz {
                            let sz = z as isize + dz;
                            if sz < 0 || sz >= nz as isize {
                                continue;
                            }
                            for y in 0..ny {
                                let sy = y as isize + dy;
                                if sy < 0 || sy >= ny as isize {
                                    continue;
                                }
                                let drow = (z * ny + y) * nx;
                                let srow = (sz as usize * ny + sy as usize) * nx;
                                let d = &mut dst[drow + x0..drow + x1];
                                let s = &src[(srow as isize + x0 as isize + dx) as usize
                                    ..(srow as isize + x1 as isize + dx) as usize];
                                for (o, i) in d.iter_mut().zip(s) {
                                    *o += wv * i;
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

/// Per-channel `(x - mean) / sqrt(var + eps) * gamma + beta`, in place.
pub fn batchnorm_inference(
    x: &mut Tensor4,
    gamma: &[f32],
    beta: &[f32],
    running_mean: &[f32],
    running_var: &[f32],
    eps: f32,
) -> Result<()> {
    let c = x.channels;
    for (name, p) in [("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)] {
        if p.len() != c {
            return Err(Error::Shape(format!("batchnorm {name}: expected {c}, got {}", p.len())));
        }
    }
    let n = x.voxels_per_channel();
    x.data.par_chunks_mut(n).enumerate().for_each(|(ch, data)| {
        let scale = gamma[ch] / (running_var[ch] + eps).sqrt();
        let shift = beta[ch] - running_mean[ch] * scale;
        for v in data {
            *v = *v * scale + shift;
        }
    });
    Ok(())
}

pub fn relu(x: &mut Tensor4) {
    x.data.par_iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Logistic function, kept strictly inside (0, 1) in f32.
pub fn sigmoid(x: &mut Tensor4) {
    const LO: f32 = f32::MIN_POSITIVE;
    const HI: f32 = 1.0 - f32::EPSILON / 2.0;
    x.data
        .par_iter_mut()
        .for_each(|v| *v = ((1.0 / (1.0 + (-(*v as f64)).exp())) as f32).clamp(LO, HI));
}

/// 2×2×2 max pooling with stride 2; every spatial dim must be even.
pub fn maxpool2(x: &Tensor4) -> Result<Tensor4> {
    if x.shape.iter().any(|&d| d % 2 != 0) {
        return Err(Error::Shape(format!("maxpool2 needs even dims, got {:?}", x.shape)));
    }
    let [nx, ny, nz] = x.shape;
    let out_shape = [nx / 2, ny / 2, nz / 2];
    let m = out_shape.iter().product::<usize>();
    let mut out = Tensor4::zeros(x.channels, out_shape);
    out.data.par_chunks_mut(m).enumerate().for_each(|(c, dst)| {
        let src = x.channel(c);
        for z in 0..out_shape[2] {
            for y in 0..out_shape[1] {
                for xx in 0..out_shape[0] {
                    let mut best = f32::NEG_INFINITY;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            let row = ((2 * z + dz) * ny + 2 * y + dy) * nx + 2 * xx;
                            best = best.max(src[row]).max(src[row + 1]);
                        }
                    }
                    dst[(z * out_shape[1] + y) * out_shape[0] + xx] = best;
                }
            }
        }
    });
    Ok(out)
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2(x: &Tensor4) -> Tensor4 {
    let [nx, ny, nz] = x.shape;
    let out_shape = [2 * nx, 2 * ny, 2 * nz];
    let m = out_shape.iter().product::<usize>();
    let mut out = Tensor4::zeros(x.channels, out_shape);
    out.data.par_chunks_mut(m).enumerate().for_each(|(c, dst)| {
        let src = x.channel(c);
        for z in 0..out_shape[2] {
            for y in 0..out_shape[1] {
                let srow = ((z / 2) * ny + y / 2) * nx;
                let drow = (z * out_shape[1] + y) * out_shape[0];
                for xx in 0..out_shape[0] {
                    dst[drow + xx] = src[srow + xx / 2];
                }
            }
        }
    });
    out
}

/// Trilinear ×2 upsampling with half-voxel alignment and edge clamping.
pub fn upsample2_trilinear(x: &Tensor4) -> Tensor4 {
    let [nx, ny, nz] = x.shape;
    let out_shape = [2 * nx, 2 * ny, 2 * nz];
    let m = out_shape.iter().product::<usize>();
    let mut out = Tensor4::zeros(x.channels, out_shape);
    // Output index j samples input coordinate (j + 0.5) / 2 - 0.5.
    let taps = |j: usize, n: usize| -> (usize, usize, f32) {
        let p = ((j as f32 + 0.5) / 2.0 - 0.5).max(0.0);
        let i0 = (p.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f32)
    };
    out.data.par_chunks_mut(m).enumerate().for_each(|(c, dst)| {
        let src = x.channel(c);
        let at = |xx: usize, y: usize, z: usize| src[(z * ny + y) * nx + xx];
        for z in 0..out_shape[2] {
            let (z0, z1, tz) = taps(z, nz);
            for y in 0..out_shape[1] {
                let (y0, y1, ty) = taps(y, ny);
                for xx in 0..out_shape[0] {
                    let (x0, x1, tx) = taps(xx, nx);
                    let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
                    let c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), tx);
                    let c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), tx);
                    let c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), tx);
                    let c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), tx);
                    dst[(z * out_shape[1] + y) * out_shape[0] + xx] =
                        lerp(lerp(c00, c10, ty), lerp(c01, c11, ty), tz);
                }
            }
        }
    });
    out
}

/// Stacks `a`'s channels followed by `b`'s.
pub fn concat_channels(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!(
            "cannot concatenate {:?} with {:?}",
            a.shape, b.shape
        )));
    }
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Ok(Tensor4 {
        channels: a.channels + b.channels,
        shape: a.shape,
        data,
    })
}
