//! Layer implementations with explicit forward/backward passes.

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// acc[i] += w * row[i + dx] over the valid overlap.
#[inline]
fn axpy_shift(acc: &mut [f32], row: &[f32], w: f32, dx: isize) {
    let n = acc.len() as isize;
    let lo = (-dx).max(0);
    let hi = n.min(n - dx);
    if lo >= hi {
        return;
    }
    let (lo, hi) = (lo as usize, hi as usize);
    let src = &row[(lo as isize + dx) as usize..(hi as isize + dx) as usize];
    for (a, &r) in acc[lo..hi].iter_mut().zip(src) {
        *a += w * r;
    }
}

/// Shifted dot product: sum_i a[i] * b[i + dx] over the valid overlap.
#[inline]
fn dot_shift(a: &[f32], b: &[f32], dx: isize) -> f64 {
    let n = a.len() as isize;
    let lo = (-dx).max(0);
    let hi = n.min(n - dx);
    if lo >= hi {
        return 0.0;
    }
    let (lo, hi) = (lo as usize, hi as usize);
    let src = &b[(lo as isize + dx) as usize..(hi as isize + dx) as usize];
    let mut s = 0.0f32;
    for (&x, &y) in a[lo..hi].iter().zip(src) {
        s += x * y;
    }
    s as f64
}

/// 3D convolution, stride 1, zero padding k/2 (spatial shape preserved).
/// Kernel size 3 for feature extraction, 1 for scale heads.
#[derive(Debug, Clone)]
pub struct Conv3d {
    /// [C_out, C_in, k, k, k]
    pub weight: Tensor,
    /// [C_out, 1, 1, 1, 1]
    pub bias: Tensor,
    pub kernel: usize,
}

impl Conv3d {
    /// He-normal initialized convolution.
    pub fn new(c_in: usize, c_out: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel == 1 || kernel == 3, "supported kernels: 1, 3");
        let fan_in = (c_in * kernel * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let n = c_out * c_in * kernel * kernel * kernel;
        // Box-Muller normal draws from a seeded uniform stream.
        let data: Vec<f32> = (0..n)
            .map(|_| {
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                (z * std) as f32
            })
            .collect();
        Conv3d {
            weight: Tensor::from_vec([c_out, c_in, kernel, kernel, kernel], data).unwrap(),
            bias: Tensor::zeros([c_out, 1, 1, 1, 1]),
            kernel,
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let [n, cin, d, h, w] = x.shape;
        assert_eq!(cin, self.c_in(), "channel mismatch");
        let cout = self.c_out();
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let mut y = Tensor::zeros([n, cout, d, h, w]);
        let plane = h * w;
        let chan = d * plane;
        let mut acc = vec![0.0f32; w];
        for ni in 0..n {
            for co in 0..cout {
                let bias = self.bias.data[co];
                for z in 0..d as isize {
                    for yy in 0..h as isize {
                        acc.iter_mut().for_each(|v| *v = bias);
                        for ci in 0..cin {
                            let x_base = (ni * cin + ci) * chan;
                            for kz in 0..k as isize {
                                let zz = z + kz - pad;
                                if zz < 0 || zz >= d as isize {
                                    continue;
                                }
                                for ky in 0..k as isize {
                                    let y2 = yy + ky - pad;
                                    if y2 < 0 || y2 >= h as isize {
                                        continue;
                                    }
                                    let row_start =
                                        x_base + zz as usize * plane + y2 as usize * w;
                                    let row = &x.data[row_start..row_start + w];
                                    let w_base = ((co * cin + ci) * k + kz as usize) * k
                                        + ky as usize;
                                    for kx in 0..k {
                                        let wv = self.weight.data[w_base * k + kx];
                                        axpy_shift(&mut acc, row, wv, kx as isize - pad);
                                    }
                                }
                            }
                        }
                        let o = ((ni * cout + co) * d + z as usize) * plane + yy as usize * w;
                        y.data[o..o + w].copy_from_slice(&acc);
                    }
                }
            }
        }
        y
    }

    /// Backward pass: fills `weight.grad` / `bias.grad` (accumulating) and
    /// returns the input gradient in the `grad` field of the result.
    pub fn backward(&mut self, x: &Tensor, gy: &Tensor) -> Tensor {
        let [n, cin, d, h, w] = x.shape;
        let cout = self.c_out();
        let k = self.kernel;
        let kc = k * k * k;
        let pad = (k / 2) as isize;
        let plane = h * w;
        let chan = d * plane;

        let mut gx = Tensor::zeros(x.shape);
        let gx_buf = gx.ensure_grad();
        self.weight.ensure_grad();
        self.bias.ensure_grad();

        // grad wrt input: correlate gy with the flipped kernel.
        let mut acc = vec![0.0f32; w];
        for ni in 0..n {
            for ci in 0..cin {
                for z in 0..d as isize {
                    for yy in 0..h as isize {
                        acc.iter_mut().for_each(|v| *v = 0.0);
                        for co in 0..cout {
                            let g_base = (ni * cout + co) * chan;
                            for kz in 0..k as isize {
                                let zz = z - (kz - pad);
                                if zz < 0 || zz >= d as isize {
                                    continue;
                                }
                                for ky in 0..k as isize {
                                    let y2 = yy - (ky - pad);
                                    if y2 < 0 || y2 >= h as isize {
                                        continue;
                                    }
                                    let row_start =
                                        g_base + zz as usize * plane + y2 as usize * w;
                                    let row = &gy.data[row_start..row_start + w];
                                    let w_base = ((co * cin + ci) * k + kz as usize) * k
                                        + ky as usize;
                                    for kx in 0..k {
                                        let wv = self.weight.data[w_base * k + kx];
                                        axpy_shift(&mut acc, row, wv, -(kx as isize - pad));
                                    }
                                }
                            }
                        }
                        let o = (ni * cin + ci) * chan + z as usize * plane + yy as usize * w;
                        for (dst, &src) in gx_buf[o..o + w].iter_mut().zip(acc.iter()) {
                            *dst += src;
                        }
                    }
                }
            }
        }

        // grad wrt weights and bias, f64 accumulation per (co, ci).
        let gw = self.weight.grad.as_mut().unwrap();
        let gb = self.bias.grad.as_mut().unwrap();
        for co in 0..cout {
            let mut b_acc = 0.0f64;
            for ni in 0..n {
                let g_base = (ni * cout + co) * chan;
                for &v in &gy.data[g_base..g_base + chan] {
                    b_acc += v as f64;
                }
            }
            gb[co] += b_acc as f32;
            for ci in 0..cin {
                let mut w_acc = vec![0.0f64; kc];
                for ni in 0..n {
                    let g_base = (ni * cout + co) * chan;
                    let x_base = (ni * cin + ci) * chan;
                    for z in 0..d as isize {
                        for yy in 0..h as isize {
                            let g_start =
                                g_base + z as usize * plane + yy as usize * w;
                            let g_row = &gy.data[g_start..g_start + w];
                            for kz in 0..k as isize {
                                let zz = z + kz - pad;
                                if zz < 0 || zz >= d as isize {
                                    continue;
                                }
                                for ky in 0..k as isize {
                                    let y2 = yy + ky - pad;
                                    if y2 < 0 || y2 >= h as isize {
                                        continue;
                                    }
                                    let x_start =
                                        x_base + zz as usize * plane + y2 as usize * w;
                                    let x_row = &x.data[x_start..x_start + w];
                                    for kx in 0..k {
                                        w_acc[(kz as usize * k + ky as usize) * k + kx] +=
                                            dot_shift(g_row, x_row, kx as isize - pad);
                                    }
                                }
                            }
                        }
                    }
                }
                let w_base = (co * cin + ci) * kc;
                for (i, &v) in w_acc.iter().enumerate() {
                    gw[w_base + i] += v as f32;
                }
            }
        }
        gx
    }
}

/// Batch norm execution mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel statistics cached by the training forward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Batch normalization over (N, D, H, W) per channel. Normalization uses
/// biased variance; running statistics use momentum 0.9 and eps 1e-5.
#[derive(Debug, Clone)]
pub struct BatchNorm3d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm3d {
    pub fn new(channels: usize) -> Self {
        let mut gamma = Tensor::zeros([channels, 1, 1, 1, 1]);
        gamma.data.iter_mut().for_each(|v| *v = 1.0);
        BatchNorm3d {
            gamma,
            beta: Tensor::zeros([channels, 1, 1, 1, 1]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
            momentum: 0.9,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    fn channel_stats(&self, x: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let [n, c, d, h, w] = x.shape;
        let m = n * d * h * w;
        let chan = d * h * w;
        let mut means = vec![0.0f64; c];
        let mut vars = vec![0.0f64; c];
        for ci in 0..c {
            let mut sum = 0.0f64;
            for ni in 0..n {
                let base = (ni * c + ci) * chan;
                for &v in &x.data[base..base + chan] {
                    sum += v as f64;
                }
            }
            let mean = sum / m as f64;
            let mut ss = 0.0f64;
            for ni in 0..n {
                let base = (ni * c + ci) * chan;
                for &v in &x.data[base..base + chan] {
                    let dv = v as f64 - mean;
                    ss += dv * dv;
                }
            }
            means[ci] = mean;
            vars[ci] = ss / m as f64;
        }
        (means, vars)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, BnCache)> {
        let [n, c, d, h, w] = x.shape;
        assert_eq!(c, self.channels(), "channel mismatch");
        let m = n * d * h * w;
        if m <= 1 {
            return Err(Error::InvalidParameter(
                "batchnorm train mode needs more than one element per channel".into(),
            ));
        }
        let (means, vars) = self.channel_stats(x);
        for ci in 0..c {
            self.running_mean[ci] =
                (self.momentum * self.running_mean[ci] as f64 + (1.0 - self.momentum) * means[ci])
                    as f32;
            self.running_var[ci] =
                (self.momentum * self.running_var[ci] as f64 + (1.0 - self.momentum) * vars[ci])
                    as f32;
        }
        let y = self.apply(x, &means, &vars);
        Ok((y, BnCache { mean: means, var: vars }))
    }

    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        let means: Vec<f64> = self.running_mean.iter().map(|&v| v as f64).collect();
        let vars: Vec<f64> = self.running_var.iter().map(|&v| v as f64).collect();
        self.apply(x, &means, &vars)
    }

    pub fn forward(&mut self, x: &Tensor, mode: BnMode) -> Result<(Tensor, Option<BnCache>)> {
        match mode {
            BnMode::Train => {
                let (y, cache) = self.forward_train(x)?;
                Ok((y, Some(cache)))
            }
            BnMode::Eval => Ok((self.forward_eval(x), None)),
        }
    }

    fn apply(&self, x: &Tensor, means: &[f64], vars: &[f64]) -> Tensor {
        let [n, c, d, h, w] = x.shape;
        let chan = d * h * w;
        let mut y = Tensor::zeros(x.shape);
        for ni in 0..n {
            for ci in 0..c {
                let scale = (self.gamma.data[ci] as f64 / (vars[ci] + self.eps).sqrt()) as f32;
                let shift =
                    (self.beta.data[ci] as f64 - means[ci] * scale as f64) as f32;
                let base = (ni * c + ci) * chan;
                for (dst, &src) in
                    y.data[base..base + chan].iter_mut().zip(&x.data[base..base + chan])
                {
                    *dst = scale * src + shift;
                }
            }
        }
        y
    }

    /// Backward through the training-mode normalization; accumulates gamma
    /// and beta gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor, cache: &BnCache, gy: &Tensor) -> Tensor {
        let [n, c, d, h, w] = x.shape;
        let chan = d * h * w;
        let m = (n * chan) as f64;
        self.gamma.ensure_grad();
        self.beta.ensure_grad();
        let mut gx = Tensor::zeros(x.shape);
        let gx_buf = gx.ensure_grad();
        for ci in 0..c {
            let inv_sd = 1.0 / (cache.var[ci] + self.eps).sqrt();
            let mean = cache.mean[ci];
            let mut sum_gy = 0.0f64;
            let mut sum_gy_xhat = 0.0f64;
            for ni in 0..n {
                let base = (ni * c + ci) * chan;
                for i in base..base + chan {
                    let xhat = (x.data[i] as f64 - mean) * inv_sd;
                    let g = gy.data[i] as f64;
                    sum_gy += g;
                    sum_gy_xhat += g * xhat;
                }
            }
            self.beta.grad.as_mut().unwrap()[ci] += sum_gy as f32;
            self.gamma.grad.as_mut().unwrap()[ci] += sum_gy_xhat as f32;
            let gamma = self.gamma.data[ci] as f64;
            for ni in 0..n {
                let base = (ni * c + ci) * chan;
                for i in base..base + chan {
                    let xhat = (x.data[i] as f64 - mean) * inv_sd;
                    let g = gy.data[i] as f64;
                    let v = gamma * inv_sd * (g - sum_gy / m - xhat * sum_gy_xhat / m);
                    gx_buf[i] += v as f32;
                }
            }
        }
        gx
    }
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut y = Tensor::zeros(x.shape);
    for (dst, &src) in y.data.iter_mut().zip(&x.data) {
        *dst = src.max(0.0);
    }
    y
}

/// Input gradient of ReLU given the forward input.
pub fn relu_backward(x: &Tensor, gy: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(x.shape);
    let buf = gx.ensure_grad();
    for i in 0..x.data.len() {
        buf[i] = if x.data[i] > 0.0 { gy.data[i] } else { 0.0 };
    }
    gx
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let mut y = Tensor::zeros(x.shape);
    for (dst, &src) in y.data.iter_mut().zip(&x.data) {
        *dst = 1.0 / (1.0 + (-src).exp());
    }
    y
}

/// 2x max pooling over D, H, W. Errors on odd spatial dimensions.
/// Returns the pooled tensor and the argmax indices for backward.
pub fn maxpool2x_forward(x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let [n, c, d, h, w] = x.shape;
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "maxpool2x needs even spatial dims, got {d}x{h}x{w}"
        )));
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut y = Tensor::zeros([n, c, od, oh, ow]);
    let mut arg = vec![0u32; y.numel()];
    let mut oi = 0;
    for ni in 0..n {
        for ci in 0..c {
            for z in 0..od {
                for yy in 0..oh {
                    for xx in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_i = 0usize;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let i = x.idx(ni, ci, 2 * z + dz, 2 * yy + dy, 2 * xx + dx);
                                    if x.data[i] > best {
                                        best = x.data[i];
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        y.data[oi] = best;
                        arg[oi] = best_i as u32;
                        oi += 1;
                    }
                }
            }
        }
    }
    Ok((y, arg))
}

pub fn maxpool2x_backward(x: &Tensor, argmax: &[u32], gy: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(x.shape);
    let buf = gx.ensure_grad();
    for (oi, &ai) in argmax.iter().enumerate() {
        buf[ai as usize] += gy.data[oi];
    }
    gx
}

/// Per-axis interpolation taps for 2x upsampling with the half-voxel
/// (align_corners = false) convention: input coord = (out + 0.5)/2 - 0.5.
fn upsample_taps(n_in: usize) -> Vec<(usize, usize, f32)> {
    (0..2 * n_in)
        .map(|o| {
            let u = (o as f64 + 0.5) / 2.0 - 0.5;
            let fl = u.floor();
            let f = (u - fl) as f32;
            let i0 = fl.max(0.0) as usize;
            let i1 = ((fl as i64 + 1).clamp(0, n_in as i64 - 1)) as usize;
            let i0 = i0.min(n_in - 1);
            (i0, i1, f)
        })
        .collect()
}

/// Trilinear 2x upsampling of D, H, W.
pub fn upsample2x_forward(x: &Tensor) -> Tensor {
    let [n, c, d, h, w] = x.shape;
    let mut y = Tensor::zeros([n, c, 2 * d, 2 * h, 2 * w]);
    let tz = upsample_taps(d);
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let mut oi = 0;
    for ni in 0..n {
        for ci in 0..c {
            for (z0, z1, fz) in &tz {
                for (y0, y1, fy) in &ty {
                    for (x0, x1, fx) in &tx {
                        let g = |zz: usize, yy: usize, xx: usize| {
                            x.data[x.idx(ni, ci, zz, yy, xx)]
                        };
                        let v00 = g(*z0, *y0, *x0) * (1.0 - fx) + g(*z0, *y0, *x1) * fx;
                        let v01 = g(*z0, *y1, *x0) * (1.0 - fx) + g(*z0, *y1, *x1) * fx;
                        let v10 = g(*z1, *y0, *x0) * (1.0 - fx) + g(*z1, *y0, *x1) * fx;
                        let v11 = g(*z1, *y1, *x0) * (1.0 - fx) + g(*z1, *y1, *x1) * fx;
                        let v0 = v00 * (1.0 - fy) + v01 * fy;
                        let v1 = v10 * (1.0 - fy) + v11 * fy;
                        y.data[oi] = v0 * (1.0 - fz) + v1 * fz;
                        oi += 1;
                    }
                }
            }
        }
    }
    y
}

/// Transpose of [`upsample2x_forward`]: scatters output gradients back onto
/// the input grid with the same interpolation weights.
pub fn upsample2x_backward(x_shape: &[usize; 5], gy: &Tensor) -> Tensor {
    let [n, c, d, h, w] = *x_shape;
    let mut gx = Tensor::zeros(*x_shape);
    let buf = gx.ensure_grad();
    let tz = upsample_taps(d);
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let chan = d * h * w;
    let mut oi = 0;
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * chan;
            for (z0, z1, fz) in &tz {
                for (y0, y1, fy) in &ty {
                    for (x0, x1, fx) in &tx {
                        let g = gy.data[oi];
                        oi += 1;
                        if g == 0.0 {
                            continue;
                        }
                        let mut add = |zz: usize, yy: usize, xx: usize, wgt: f32| {
                            buf[base + (zz * h + yy) * w + xx] += g * wgt;
                        };
                        add(*z0, *y0, *x0, (1.0 - fz) * (1.0 - fy) * (1.0 - fx));
                        add(*z0, *y0, *x1, (1.0 - fz) * (1.0 - fy) * fx);
                        add(*z0, *y1, *x0, (1.0 - fz) * fy * (1.0 - fx));
                        add(*z0, *y1, *x1, (1.0 - fz) * fy * fx);
                        add(*z1, *y0, *x0, fz * (1.0 - fy) * (1.0 - fx));
                        add(*z1, *y0, *x1, fz * (1.0 - fy) * fx);
                        add(*z1, *y1, *x0, fz * fy * (1.0 - fx));
                        add(*z1, *y1, *x1, fz * fy * fx);
                    }
                }
            }
        }
    }
    gx
}
