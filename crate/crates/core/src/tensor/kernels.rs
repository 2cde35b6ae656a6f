//! Forward and backward rules for every differentiable operation.
//!
//! Forward functions validate shapes and return fresh tensors. Backward
//! functions take the upstream gradient plus whatever the forward pass saved
//! and return gradients for the inputs that asked for them.

use serde::{Deserialize, Serialize};

use super::{same_shape, Real, Tensor};
use crate::error::{arg_err, shape_err, Error, Result};

/// Train or eval behaviour for batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

// Upper bound on im2col scratch, in elements.
const COLS_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn plane(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn chunk(&self) -> usize {
        (COLS_BUDGET / (self.patch() * self.plane()).max(1)).clamp(1, self.n)
    }
}

pub fn conv_geometry<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    let (n, c_in, h, w) = input.dims4("conv2d")?;
    let (c_out, k_in, kh, kw) = kernel.dims4("conv2d")?;
    if c_in != k_in {
        return Err(shape_err(
            "conv2d",
            format!(
                "input {:?} has {c_in} channels but kernel {:?} expects {k_in}",
                input.shape(),
                kernel.shape()
            ),
        ));
    }
    if stride == 0 {
        return Err(arg_err("conv2d", "stride must be at least 1"));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(shape_err(
                "conv2d",
                format!("bias {:?} does not match kernel {:?}", b.shape(), kernel.shape()),
            ));
        }
    }
    let (ph, pw) = (h + 2 * padding, w + 2 * padding);
    if ph < kh || pw < kw {
        return Err(shape_err(
            "conv2d",
            format!(
                "kernel {:?} larger than padded input {:?} (padding {padding})",
                kernel.shape(),
                input.shape()
            ),
        ));
    }
    let oh = (ph - kh) / stride + 1;
    let ow = (pw - kw) / stride + 1;
    Ok(ConvGeometry {
        n,
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        stride,
        padding,
        oh,
        ow,
    })
}

fn im2col<T: Real>(x: &[T], g: &ConvGeometry, first: usize, count: usize, cols: &mut [T]) {
    let plane = g.plane();
    let width = count * plane;
    let img_len = g.c_in * g.h * g.w;
    for ci in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let row_buf = &mut cols[row * width..(row + 1) * width];
                for img in 0..count {
                    let src = &x[(first + img) * img_len + ci * g.h * g.w..][..g.h * g.w];
                    let dst = &mut row_buf[img * plane..(img + 1) * plane];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        if iy < 0 || iy >= g.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for (ox, d) in line.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            *d = if ix < 0 || ix >= g.w as isize {
                                T::zero()
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, first: usize, count: usize, dx: &mut [T]) {
    let plane = g.plane();
    let width = count * plane;
    let img_len = g.c_in * g.h * g.w;
    for ci in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let row_buf = &cols[row * width..(row + 1) * width];
                for img in 0..count {
                    let dst = &mut dx[(first + img) * img_len + ci * g.h * g.w..][..g.h * g.w];
                    let src = &row_buf[img * plane..(img + 1) * plane];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += src[oy * g.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-d cross-correlation of `input[n,c_in,h,w]` with `kernel[c_out,c_in,kh,kw]`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input, kernel, bias, stride, padding)?;
    let plane = g.plane();
    let patch = g.patch();
    let mut out = vec![T::zero(); g.n * g.c_out * plane];
    let x = input.data();
    let wk = kernel.data();

    if g.is_pointwise() {
        for img in 0..g.n {
            let xs = &x[img * g.c_in * plane..(img + 1) * g.c_in * plane];
            let os = &mut out[img * g.c_out * plane..(img + 1) * g.c_out * plane];
            T::gemm(g.c_out, g.c_in, plane, T::one(), wk, g.c_in as isize, 1, xs, plane as isize, 1, T::zero(), os);
        }
    } else {
        let chunk = g.chunk();
        let mut cols = vec![T::zero(); patch * chunk * plane];
        let mut mat = vec![T::zero(); g.c_out * chunk * plane];
        let mut first = 0;
        while first < g.n {
            let count = chunk.min(g.n - first);
            let width = count * plane;
            im2col(x, &g, first, count, &mut cols[..patch * width]);
            T::gemm(
                g.c_out,
                patch,
                width,
                T::one(),
                wk,
                patch as isize,
                1,
                &cols[..patch * width],
                width as isize,
                1,
                T::zero(),
                &mut mat[..g.c_out * width],
            );
            for img in 0..count {
                for co in 0..g.c_out {
                    let src = &mat[co * width + img * plane..][..plane];
                    out[((first + img) * g.c_out + co) * plane..][..plane].copy_from_slice(src);
                }
            }
            first += count;
        }
    }

    if let Some(b) = bias {
        let b = b.data();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = b[i % g.c_out];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    Tensor::new(vec![g.n, g.c_out, g.oh, g.ow], out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
    need_input: bool,
    need_kernel: bool,
    need_bias: bool,
) -> Result<ConvGrads<T>> {
    let g = conv_geometry(input, kernel, None, stride, padding)?;
    same_shape("conv2d_backward", grad_out.shape(), &[g.n, g.c_out, g.oh, g.ow])?;
    let plane = g.plane();
    let patch = g.patch();
    let x = input.data();
    let wk = kernel.data();
    let go = grad_out.data();
    let mut dx = need_input.then(|| vec![T::zero(); input.numel()]);
    let mut dw = need_kernel.then(|| vec![T::zero(); kernel.numel()]);

    if g.is_pointwise() {
        for img in 0..g.n {
            let xs = &x[img * g.c_in * plane..(img + 1) * g.c_in * plane];
            let gs = &go[img * g.c_out * plane..(img + 1) * g.c_out * plane];
            if let Some(dw) = dw.as_mut() {
                // dW[co, ci] += sum_p g[co, p] x[ci, p]
                T::gemm(g.c_out, plane, g.c_in, T::one(), gs, plane as isize, 1, xs, 1, plane as isize, T::one(), dw);
            }
            if let Some(dx) = dx.as_mut() {
                let ds = &mut dx[img * g.c_in * plane..(img + 1) * g.c_in * plane];
                T::gemm(g.c_in, g.c_out, plane, T::one(), wk, 1, g.c_in as isize, gs, plane as isize, 1, T::zero(), ds);
            }
        }
    } else if need_input || need_kernel {
        let chunk = g.chunk();
        let mut cols = vec![T::zero(); patch * chunk * plane];
        let mut gmat = vec![T::zero(); g.c_out * chunk * plane];
        let mut first = 0;
        while first < g.n {
            let count = chunk.min(g.n - first);
            let width = count * plane;
            for img in 0..count {
                for co in 0..g.c_out {
                    let src = &go[((first + img) * g.c_out + co) * plane..][..plane];
                    gmat[co * width + img * plane..][..plane].copy_from_slice(src);
                }
            }
            if let Some(dw) = dw.as_mut() {
                im2col(x, &g, first, count, &mut cols[..patch * width]);
                T::gemm(
                    g.c_out,
                    width,
                    patch,
                    T::one(),
                    &gmat[..g.c_out * width],
                    width as isize,
                    1,
                    &cols[..patch * width],
                    1,
                    width as isize,
                    T::one(),
                    dw,
                );
            }
            if let Some(dx) = dx.as_mut() {
                T::gemm(
                    patch,
                    g.c_out,
                    width,
                    T::one(),
                    wk,
                    1,
                    patch as isize,
                    &gmat[..g.c_out * width],
                    width as isize,
                    1,
                    T::zero(),
                    &mut cols[..patch * width],
                );
                col2im(&cols[..patch * width], &g, first, count, dx);
            }
            first += count;
        }
    }

    let db = need_bias.then(|| {
        let mut db = vec![T::zero(); g.c_out];
        for (i, chunk) in go.chunks(plane).enumerate() {
            db[i % g.c_out] += chunk.iter().copied().sum::<T>();
        }
        db
    });

    Ok(ConvGrads {
        input: dx.map(|d| Tensor::new(input.shape().to_vec(), d)).transpose()?,
        kernel: dw.map(|d| Tensor::new(kernel.shape().to_vec(), d)).transpose()?,
        bias: db.map(|d| Tensor::new(vec![g.c_out], d)).transpose()?,
    })
}

/// Running statistics carried by a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

/// What the backward rule of batch norm needs from the forward pass.
#[derive(Debug, Clone)]
pub struct BnSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub train: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn batch_norm2d<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: Option<&mut RunningStats<T>>,
    mode: Mode,
    momentum: f64,
    eps: f64,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    let (n, c, h, w) = input.dims4("batch_norm2d")?;
    same_shape("batch_norm2d gamma", gamma.shape(), &[c])?;
    same_shape("batch_norm2d beta", beta.shape(), &[c])?;
    let plane = h * w;
    let count = n * plane;
    let x = input.data();
    let eps_t = T::from_f64_lossy(eps);

    let (mean, inv_std) = match mode {
        Mode::Train => {
            if count < 2 {
                return Err(arg_err(
                    "batch_norm2d",
                    format!("train mode needs at least 2 values per channel, got n*h*w = {count}"),
                ));
            }
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                // Accumulate in f64 for a stable mean/variance.
                let mut s = 0.0;
                for img in 0..n {
                    s += x[(img * c + ch) * plane..][..plane].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let m = s / count as f64;
                let mut sq = 0.0;
                for img in 0..n {
                    sq += x[(img * c + ch) * plane..][..plane]
                        .iter()
                        .map(|v| {
                            let d = v.as_f64() - m;
                            d * d
                        })
                        .sum::<f64>();
                }
                mean[ch] = T::from_f64_lossy(m);
                var[ch] = T::from_f64_lossy(sq / count as f64);
            }
            if let Some(rs) = running {
                let mom = T::from_f64_lossy(momentum);
                let unbias = T::from_f64_lossy(count as f64 / (count - 1) as f64);
                for ch in 0..c {
                    rs.mean[ch] = (T::one() - mom) * rs.mean[ch] + mom * mean[ch];
                    rs.var[ch] = (T::one() - mom) * rs.var[ch] + mom * var[ch] * unbias;
                }
            }
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
            (mean, inv_std)
        }
        Mode::Eval => {
            let rs = running.ok_or(Error::UninitializedRunningStats)?;
            if rs.mean.len() != c || rs.var.len() != c {
                return Err(shape_err(
                    "batch_norm2d",
                    format!("running stats sized {} for {c} channels", rs.mean.len()),
                ));
            }
            let inv_std = rs.var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
            (rs.mean.clone(), inv_std)
        }
    };

    let gm = gamma.data();
    let bt = beta.data();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * plane;
            for i in base..base + plane {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = gm[ch] * xh + bt[ch];
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), out)?,
        BnSaved {
            xhat,
            inv_std,
            train: mode == Mode::Train,
        },
    ))
}

pub fn batch_norm2d_backward<T: Real>(
    gamma: &Tensor<T>,
    saved: &BnSaved<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = grad_out.dims4("batch_norm2d_backward")?;
    let plane = h * w;
    let m = (n * plane) as f64;
    let gy = grad_out.data();
    let gm = gamma.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * plane;
            for i in base..base + plane {
                dbeta[ch] += gy[i];
                dgamma[ch] += gy[i] * saved.xhat[i];
            }
        }
    }
    let mut dx = vec![T::zero(); gy.len()];
    let m_t = T::from_f64_lossy(m);
    for ch in 0..c {
        let scale = gm[ch] * saved.inv_std[ch];
        for img in 0..n {
            let base = (img * c + ch) * plane;
            for i in base..base + plane {
                dx[i] = if saved.train {
                    scale * (gy[i] - dbeta[ch] / m_t - saved.xhat[i] * dgamma[ch] / m_t)
                } else {
                    scale * gy[i]
                };
            }
        }
    }
    Ok((
        Tensor::new(grad_out.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    Tensor { shape: x.shape().to_vec(), data }
}

pub fn relu_backward<T: Real>(out: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = out
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
        .collect();
    Tensor { shape: out.shape().to_vec(), data }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .map(|&v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        })
        .collect();
    Tensor { shape: x.shape().to_vec(), data }
}

pub fn sigmoid_backward<T: Real>(out: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = out
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&s, &g)| g * s * (T::one() - s))
        .collect();
    Tensor { shape: out.shape().to_vec(), data }
}

/// `y = x W^T + b` for `x[n,in]`, `weight[out,in]`.
pub fn linear<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (n, fin) = dims2("linear", x)?;
    let (fout, win) = dims2("linear", weight)?;
    if fin != win {
        return Err(shape_err(
            "linear",
            format!("input {:?} vs weight {:?}", x.shape(), weight.shape()),
        ));
    }
    let mut out = vec![T::zero(); n * fout];
    if let Some(b) = bias {
        same_shape("linear bias", b.shape(), &[fout])?;
        for row in out.chunks_mut(fout) {
            row.copy_from_slice(b.data());
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    T::gemm(n, fin, fout, T::one(), x.data(), fin as isize, 1, weight.data(), 1, fin as isize, beta, &mut out);
    Tensor::new(vec![n, fout], out)
}

pub fn linear_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, fin) = dims2("linear_backward", x)?;
    let (fout, _) = dims2("linear_backward", weight)?;
    let gy = grad_out.data();
    let mut dx = vec![T::zero(); n * fin];
    T::gemm(n, fout, fin, T::one(), gy, fout as isize, 1, weight.data(), fin as isize, 1, T::zero(), &mut dx);
    let mut dw = vec![T::zero(); fout * fin];
    T::gemm(fout, n, fin, T::one(), gy, 1, fout as isize, x.data(), fin as isize, 1, T::zero(), &mut dw);
    let mut db = vec![T::zero(); fout];
    for row in gy.chunks(fout) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    Ok((
        Tensor::new(vec![n, fin], dx)?,
        Tensor::new(vec![fout, fin], dw)?,
        Tensor::new(vec![fout], db)?,
    ))
}

fn dims2<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        &[a, b] => Ok((a, b)),
        s => Err(shape_err(op, format!("expected a 2-d tensor, got {s:?}"))),
    }
}

/// Mean over the spatial dims: `[n,c,h,w] -> [n,c]`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("global_avg_pool")?;
    let plane = h * w;
    let data = x
        .data()
        .chunks(plane)
        .map(|p| T::from_f64_lossy(p.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64))
        .collect();
    Tensor::new(vec![n, c], data)
}

pub fn global_avg_pool_backward<T: Real>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let plane = input_shape[2] * input_shape[3];
    let inv = T::one() / T::from_usize(plane).unwrap();
    let mut data = Vec::with_capacity(plane * grad_out.numel());
    for &g in grad_out.data() {
        data.extend(std::iter::repeat(g * inv).take(plane));
    }
    Tensor::new(input_shape.to_vec(), data)
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
///
/// Returns the scalar loss and the softmax probabilities (kept for backward).
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(Tensor<T>, Vec<T>)> {
    let (n, k) = dims2("softmax_cross_entropy", logits)?;
    if labels.len() != n {
        return Err(shape_err(
            "softmax_cross_entropy",
            format!("{} labels for logits {:?}", labels.len(), logits.shape()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(arg_err(
            "softmax_cross_entropy",
            format!("label {bad} out of range for {k} classes"),
        ));
    }
    let mut probs = vec![T::zero(); n * k];
    let mut total = 0f64;
    for (i, row) in logits.data().chunks(k).enumerate() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
            *p = (v - max).exp();
            z += *p;
        }
        probs[i * k..(i + 1) * k].iter_mut().for_each(|p| *p /= z);
        total += (z.ln() + max - row[labels[i]]).as_f64();
    }
    let loss = T::from_f64_lossy(total / n as f64);
    Ok((Tensor::scalar(loss), probs))
}

pub fn softmax_cross_entropy_backward<T: Real>(
    logits_shape: &[usize],
    probs: &[T],
    labels: &[usize],
    grad: T,
) -> Result<Tensor<T>> {
    let (n, k) = (logits_shape[0], logits_shape[1]);
    let scale = grad / T::from_usize(n).unwrap();
    let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
    for (i, &l) in labels.iter().enumerate() {
        d[i * k + l] -= scale;
    }
    Tensor::new(logits_shape.to_vec(), d)
}

/// Nearest-neighbour resampling; output cell `(y, x)` reads source
/// `(y * h / out_h, x * w / out_w)` (integer division).
pub fn interpolate_nearest<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("interpolate_nearest")?;
    if out_h == 0 || out_w == 0 {
        return Err(arg_err("interpolate_nearest", "output size must be at least 1x1"));
    }
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in src.chunks(h * w) {
        for oy in 0..out_h {
            let sy = oy * h / out_h;
            for ox in 0..out_w {
                out.push(plane[sy * w + ox * w / out_w]);
            }
        }
    }
    Tensor::new(vec![n, c, out_h, out_w], out)
}

pub fn interpolate_nearest_backward<T: Real>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (_, _, out_h, out_w) = grad_out.dims4("interpolate_nearest_backward")?;
    let mut dx = vec![T::zero(); input_shape.iter().product()];
    for (plane_idx, g) in grad_out.data().chunks(out_h * out_w).enumerate() {
        let dst = &mut dx[plane_idx * h * w..(plane_idx + 1) * h * w];
        for oy in 0..out_h {
            let sy = oy * h / out_h;
            for ox in 0..out_w {
                dst[sy * w + ox * w / out_w] += g[oy * out_w + ox];
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}

fn pool_window(i: usize, len: usize, out: usize) -> (usize, usize) {
    (i * len / out, ((i + 1) * len).div_ceil(out))
}

/// Adaptive max pooling to `out x out`. Returns the pooled tensor and, for
/// every output cell, the flat input index it was taken from (first maximum
/// in row-major order on ties).
pub fn adaptive_max_pool<T: Real>(x: &Tensor<T>, out: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4("adaptive_max_pool")?;
    if out == 0 || out > h || out > w {
        return Err(arg_err(
            "adaptive_max_pool",
            format!("output size {out} must be in 1..={}", h.min(w)),
        ));
    }
    let src = x.data();
    let mut vals = Vec::with_capacity(n * c * out * out);
    let mut idx = Vec::with_capacity(n * c * out * out);
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..out {
            let (y0, y1) = pool_window(oy, h, out);
            for ox in 0..out {
                let (x0, x1) = pool_window(ox, w, out);
                let mut best = base + y0 * w + x0;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        let i = base + yy * w + xx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                }
                vals.push(src[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, out, out], vals)?, idx))
}

pub fn adaptive_max_pool_backward<T: Real>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut dx = vec![T::zero(); input_shape.iter().product()];
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        dx[i] += g;
    }
    Tensor::new(input_shape.to_vec(), dx)
}

/// Mean of squared differences over every element.
pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mse", a.shape(), b.shape())?;
    // Accumulate in f64 so the loss does not drift with element count.
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x - y).as_f64();
            d * d
        })
        .sum();
    Ok(Tensor::scalar(T::from_f64_lossy(s / a.numel() as f64)))
}

pub fn mse_backward<T: Real>(a: &Tensor<T>, b: &Tensor<T>, grad: T) -> Tensor<T> {
    let scale = T::from_f64_lossy(2.0) * grad / T::from_usize(a.numel()).unwrap();
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * scale).collect();
    Tensor { shape: a.shape().to_vec(), data }
}

pub fn zip_map<T: Real>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    same_shape(op, a.shape(), b.shape())?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor { shape: a.shape().to_vec(), data })
}

pub fn map<T: Real>(a: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor {
        shape: a.shape().to_vec(),
        data: a.data().iter().map(|&v| f(v)).collect(),
    }
}

/// `x[n,c,h,w] * gate[n,1,h,w]`, broadcasting the gate over channels.
pub fn mul_channel_broadcast<T: Real>(x: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("mul_channel_broadcast")?;
    same_shape("mul_channel_broadcast gate", gate.shape(), &[n, 1, h, w])?;
    let plane = h * w;
    let gd = gate.data();
    let mut out = x.data().to_vec();
    for img in 0..n {
        let gp = &gd[img * plane..(img + 1) * plane];
        for ch in 0..c {
            let xs = &mut out[(img * c + ch) * plane..][..plane];
            xs.iter_mut().zip(gp).for_each(|(v, &g)| *v *= g);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn mul_channel_broadcast_backward<T: Real>(
    x: &Tensor<T>,
    gate: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = x.dims4("mul_channel_broadcast_backward")?;
    let plane = h * w;
    let (xd, gd, go) = (x.data(), gate.data(), grad_out.data());
    let mut dx = vec![T::zero(); xd.len()];
    let mut dg = vec![T::zero(); gd.len()];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * plane;
            for p in 0..plane {
                dx[base + p] = go[base + p] * gd[img * plane + p];
                dg[img * plane + p] += go[base + p] * xd[base + p];
            }
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), dx)?, Tensor::new(gate.shape().to_vec(), dg)?))
}

/// Concatenate 4-d tensors along the channel axis.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| arg_err("concat_channels", "nothing to concatenate"))?;
    let (n, _, h, w) = first.dims4("concat_channels")?;
    let mut total_c = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4("concat_channels")?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(shape_err(
                "concat_channels",
                format!("{:?} vs {:?}", first.shape(), p.shape()),
            ));
        }
        total_c += pc;
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * total_c * plane);
    for img in 0..n {
        for p in parts {
            let pc = p.shape()[1];
            out.extend_from_slice(&p.data()[img * pc * plane..(img + 1) * pc * plane]);
        }
    }
    Tensor::new(vec![n, total_c, h, w], out)
}

/// Channels `start..start + len` of a 4-d tensor.
pub fn narrow_channels<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("narrow_channels")?;
    if len == 0 || start + len > c {
        return Err(arg_err(
            "narrow_channels",
            format!("range {start}..{} outside {c} channels", start + len),
        ));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * len * plane);
    for img in 0..n {
        out.extend_from_slice(&x.data()[(img * c + start) * plane..(img * c + start + len) * plane]);
    }
    Tensor::new(vec![n, len, h, w], out)
}

/// Scatter a channel-slice gradient back into the full input shape.
pub fn narrow_channels_backward<T: Real>(input_shape: &[usize], start: usize, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let len = grad_out.shape()[1];
    let plane = h * w;
    let mut dx = vec![T::zero(); n * c * plane];
    for img in 0..n {
        dx[(img * c + start) * plane..(img * c + start + len) * plane]
            .copy_from_slice(&grad_out.data()[img * len * plane..(img + 1) * len * plane]);
    }
    Tensor::new(input_shape.to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn conv_ones_gives_fours() {
        let x = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::<f32>::full(&[1, 1, 2, 2], 1.0);
        let y = conv2d(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::<f32>::from_fn(&[2, 1, 4, 5], |i| i as f32 * 0.25 - 3.0);
        let k = Tensor::<f32>::full(&[1, 1, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &k, None, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_output_size_with_stride_and_padding() {
        let x = Tensor::<f32>::zeros(&[1, 2, 7, 6]);
        let k = Tensor::<f32>::zeros(&[3, 2, 3, 3]);
        let y = conv2d(&x, &k, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 4, 3]);
    }

    #[test]
    fn conv_rejects_channel_mismatch_naming_shapes() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let k = Tensor::<f32>::zeros(&[1, 3, 1, 1]);
        let msg = conv2d(&x, &k, None, 1, 0).unwrap_err().to_string();
        assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 1, 1]"), "{msg}");
    }

    #[test]
    fn conv_rejects_empty_output() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        let k = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        assert!(conv2d(&x, &k, None, 1, 0).is_err());
        assert!(conv2d(&x, &k, None, 0, 1).is_err());
    }

    #[test]
    fn batch_norm_train_standardizes() {
        let x = Tensor::<f64>::from_fn(&[3, 2, 2, 2], |i| ((i * 7919) % 13) as f64 - 4.0);
        let gamma = Tensor::full(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        let (y, _) = batch_norm2d(&x, &gamma, &beta, None, Mode::Train, BN_MOMENTUM, BN_EPS).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|img| y.data()[(img * 2 + ch) * 4..][..4].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
    }

    #[test]
    fn batch_norm_constant_input_yields_beta() {
        let x = Tensor::<f32>::full(&[2, 1, 3, 3], 2.5);
        let gamma = Tensor::full(&[1], 1.0);
        let beta = Tensor::full(&[1], 5.0);
        let (y, _) = batch_norm2d(&x, &gamma, &beta, None, Mode::Train, BN_MOMENTUM, BN_EPS).unwrap();
        assert!(y.data().iter().all(|&v| (v - 5.0).abs() < 1e-4));
    }

    #[test]
    fn batch_norm_eval_needs_running_stats() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        let p = Tensor::full(&[1], 1.0);
        let err = batch_norm2d(&x, &p, &p, None, Mode::Eval, BN_MOMENTUM, BN_EPS).unwrap_err();
        assert!(matches!(err, Error::UninitializedRunningStats));
    }

    #[test]
    fn batch_norm_train_rejects_single_value_channels() {
        let x = Tensor::<f32>::zeros(&[1, 1, 1, 1]);
        let p = Tensor::full(&[1], 1.0);
        assert!(batch_norm2d(&x, &p, &p, None, Mode::Train, BN_MOMENTUM, BN_EPS).is_err());
    }

    #[test]
    fn batch_norm_updates_running_stats() {
        let x = t(&[2, 1, 1, 2], &[1.0, 3.0, 5.0, 7.0]);
        let p = Tensor::full(&[1], 1.0);
        let z = Tensor::zeros(&[1]);
        let mut rs = RunningStats::new(1);
        batch_norm2d(&x, &p, &z, Some(&mut rs), Mode::Train, 0.1, BN_EPS).unwrap();
        assert!((rs.mean[0] - 0.4).abs() < 1e-12);
        // unbiased variance of {1,3,5,7} is 20/3
        assert!((rs.var[0] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::<f64>::zeros(&[3, 4]);
        let (l, _) = softmax_cross_entropy(&logits, &[0, 1, 3]).unwrap();
        assert!((l.item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_correct() {
        let logits = t(&[1, 3], &[50.0, 0.0, 0.0]);
        let (l, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(l.item() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let logits = Tensor::<f64>::zeros(&[1, 3]);
        assert!(softmax_cross_entropy(&logits, &[3]).is_err());
    }

    #[test]
    fn interpolate_single_source() {
        let x = t(&[1, 1, 1, 1], &[7.0]);
        let y = interpolate_nearest(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[7.0; 4]);
    }

    #[test]
    fn interpolate_gradient_counts_replicas() {
        let g = Tensor::<f64>::full(&[1, 1, 6, 4], 1.0);
        let dx = interpolate_nearest_backward(&[1, 1, 3, 2], &g).unwrap();
        assert!(dx.data().iter().all(|&v| v == 4.0));
        let g = Tensor::<f64>::full(&[1, 1, 5, 5], 1.0);
        let dx = interpolate_nearest_backward(&[1, 1, 2, 2], &g).unwrap();
        assert_eq!(dx.sum(), 25.0);
    }

    #[test]
    fn max_pool_window_maxima() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let (y, _) = adaptive_max_pool(&x, 2).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
        let (same, _) = adaptive_max_pool(&x, 4).unwrap();
        assert_eq!(same, x);
        assert!(adaptive_max_pool(&x, 5).is_err());
    }

    #[test]
    fn max_pool_ties_take_first() {
        let x = Tensor::<f64>::full(&[1, 1, 2, 2], 1.0);
        let (_, idx) = adaptive_max_pool(&x, 1).unwrap();
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn narrow_and_concat_invert() {
        let a = Tensor::<f64>::from_fn(&[2, 3, 2, 2], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[2, 1, 2, 2], |i| -(i as f64));
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(narrow_channels(&cat, 0, 3).unwrap(), a);
        assert_eq!(narrow_channels(&cat, 3, 1).unwrap(), b);
    }
}
