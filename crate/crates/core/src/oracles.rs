//! Slow reference implementations and a finite-difference gradient harness.
//!
//! Nothing here calls into the fast kernels it is used to validate: windows,
//! indices and reductions are recomputed with plain loops in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{arg_err, Error, Result};
use crate::models::{Model, ModelSpec, Module};
use crate::review::{hcl, review_loss, AbfUnit, AblationMode, Fusion, HclSpec, Level, ReviewUnits};
use crate::tensor::kernels::{Mode, RunningStats, BN_EPS, BN_MOMENTUM};
use crate::tensor::{Param, Tape, Tensor, Var};

/// Largest output (in elements) the naive convolution accepts.
pub const CONV_OUTPUT_CAP: usize = 100_000;
/// Relative-error tolerance of the gradient suite.
pub const GRAD_TOL: f64 = 1e-4;
/// Share of sampled coordinates that must be within [`GRAD_TOL`].
pub const GRAD_PASS_FRACTION: f64 = 0.99;
/// Central-difference step of the gradient suite.
pub const FD_STEP: f64 = 1e-6;
/// Coordinates sampled per tensor.
pub const MAX_COORDS: usize = 64;

fn dims4(x: &Tensor<f64>) -> Result<[usize; 4]> {
    match *x.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(arg_err("oracle", format!("expected a 4-d tensor, got {:?}", x.shape()))),
    }
}

/// Direct-summation convolution with zero padding.
pub fn conv2d_naive(
    input: &Tensor<f64>,
    kernel: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<f64>> {
    let [n, c, h, w] = dims4(input)?;
    let [o, kc, kh, kw] = dims4(kernel)?;
    if kc != c || stride == 0 {
        return Err(arg_err("conv2d_naive", "channel mismatch or zero stride"));
    }
    let (ph, pw) = ((h + 2 * padding) as i64, (w + 2 * padding) as i64);
    if ph < kh as i64 || pw < kw as i64 {
        return Err(arg_err("conv2d_naive", "kernel larger than padded input"));
    }
    let oh = ((ph - kh as i64) / stride as i64 + 1) as usize;
    let ow = ((pw - kw as i64) / stride as i64 + 1) as usize;
    if n * o * oh * ow > CONV_OUTPUT_CAP {
        return Err(Error::OracleCap(n * o * oh * ow));
    }
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0f64; n * o * oh * ow];
    for b in 0..n {
        for f in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bt| bt.data()[f]);
                    for ch in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as i64 - padding as i64;
                                let ix = (ox * stride + kx) as i64 - padding as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    continue;
                                }
                                let xv = x[((b * c + ch) * h + iy as usize) * w + ix as usize];
                                let kv = k[((f * c + ch) * kh + ky) * kw + kx];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((b * o + f) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out)
}

/// Adaptive max pooling to `size x size`; the window of output `i` covers
/// `[floor(i*h/size), ceil((i+1)*h/size))`, computed in floating point.
pub fn adaptive_max_pool_naive(x: &Tensor<f64>, size: usize) -> Result<Tensor<f64>> {
    let [n, c, h, w] = dims4(x)?;
    if size == 0 || size > h || size > w {
        return Err(arg_err("adaptive_max_pool_naive", format!("size {size} for {h}x{w}")));
    }
    let window = |i: usize, len: usize| {
        let lo = (i as f64 * len as f64 / size as f64).floor() as usize;
        let hi = ((i + 1) as f64 * len as f64 / size as f64).ceil() as usize;
        lo..hi
    };
    let mut out = Vec::with_capacity(n * c * size * size);
    for plane in x.data().chunks(h * w) {
        for oy in 0..size {
            for ox in 0..size {
                let mut best = f64::NEG_INFINITY;
                for y in window(oy, h) {
                    for xx in window(ox, w) {
                        best = best.max(plane[y * w + xx]);
                    }
                }
                out.push(best);
            }
        }
    }
    Tensor::new(vec![n, c, size, size], out)
}

/// Largest `s` with `s * out <= dst * len`, found by scanning.
fn nearest_source(dst: usize, len: usize, out: usize) -> usize {
    let mut s = 0;
    while s + 1 < len && (s + 1) * out <= dst * len {
        s += 1;
    }
    s
}

pub fn interpolate_nearest_naive(x: &Tensor<f64>, out_h: usize, out_w: usize) -> Result<Tensor<f64>> {
    let [n, c, h, w] = dims4(x)?;
    if out_h == 0 || out_w == 0 {
        return Err(arg_err("interpolate_nearest_naive", "empty output"));
    }
    let mut out = vec![0f64; n * c * out_h * out_w];
    for p in 0..n * c {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let sy = nearest_source(oy, h, out_h);
                let sx = nearest_source(ox, w, out_w);
                out[(p * out_h + oy) * out_w + ox] = x.data()[(p * h + sy) * w + sx];
            }
        }
    }
    Tensor::new(vec![n, c, out_h, out_w], out)
}

/// Mean of `-log softmax(logits)[label]` over rows.
pub fn cross_entropy_naive(logits: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    let (n, k) = match *logits.shape() {
        [n, k] => (n, k),
        _ => return Err(arg_err("cross_entropy_naive", "logits must be 2-d")),
    };
    if labels.len() != n || labels.iter().any(|&l| l >= k) {
        return Err(arg_err("cross_entropy_naive", "labels do not fit the logits"));
    }
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let mut m = f64::NEG_INFINITY;
        for &v in row {
            if v > m {
                m = v;
            }
        }
        let mut z = 0.0;
        for &v in row {
            z += (v - m).exp();
        }
        total += m + z.ln() - row[label];
    }
    Ok(total / n as f64)
}

pub fn mse_naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(arg_err("mse_naive", "shape mismatch"));
    }
    let mut s = 0.0;
    for i in 0..a.numel() {
        let d = a.data()[i] - b.data()[i];
        s += d * d;
    }
    Ok(s / a.numel() as f64)
}

/// Hierarchical context loss by explicit per-level loops.
pub fn hcl_naive(fused: &Tensor<f64>, teacher: &Tensor<f64>, spec: &HclSpec) -> Result<f64> {
    if fused.shape() != teacher.shape() {
        return Err(arg_err("hcl_naive", "shape mismatch"));
    }
    let [_, _, h, w] = dims4(fused)?;
    let native = h.min(w);
    let mut total = 0.0;
    let mut weight_sum = 0.0;
    for (level, &wt) in spec.levels().iter().zip(spec.weights()) {
        let size = match *level {
            Level::Native => native,
            Level::Fixed(s) => s,
            Level::Minus(k) => native.checked_sub(k).unwrap_or(0),
            Level::Div(k) => native / k,
        };
        if size == 0 || size > native {
            return Err(arg_err("hcl_naive", format!("level size {size} for {h}x{w}")));
        }
        let d = if size == h && size == w {
            mse_naive(fused, teacher)?
        } else {
            mse_naive(&adaptive_max_pool_naive(fused, size)?, &adaptive_max_pool_naive(teacher, size)?)?
        };
        total += wt * d;
        weight_sum += wt;
    }
    Ok(if spec.normalize() { total / weight_sum } else { total })
}

/// `(student_stage, teacher_stage)` pairs a mode compares, found by testing
/// every combination.
pub fn review_pairs(mode: AblationMode, stages: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for s in 0..stages {
        for t in 0..stages {
            let keep = match mode {
                AblationMode::ReviewOnly => t <= s,
                _ => t == s,
            };
            if keep {
                pairs.push((s, t));
            }
        }
    }
    pairs
}

/// Finite-difference agreement for one tensor.
#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub samples: usize,
    pub rel_errors: Vec<f64>,
}

impl GradReport {
    fn from_errors(rel_errors: Vec<f64>) -> Result<Self> {
        if rel_errors.is_empty() {
            return Err(arg_err("grad report", "no coordinates sampled"));
        }
        let max = rel_errors.iter().copied().fold(0.0, f64::max);
        let mean = rel_errors.iter().sum::<f64>() / rel_errors.len() as f64;
        Ok(Self {
            max_rel_err: max,
            mean_rel_err: mean,
            samples: rel_errors.len(),
            rel_errors,
        })
    }

    pub fn pass_fraction(&self, tol: f64) -> f64 {
        self.rel_errors.iter().filter(|&&e| e < tol).count() as f64 / self.samples as f64
    }

    pub fn merge<'a>(reports: impl IntoIterator<Item = &'a GradReport>) -> Result<GradReport> {
        Self::from_errors(reports.into_iter().flat_map(|r| r.rel_errors.iter().copied()).collect())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Deterministic stratified sample of at most `max` indices out of `len`:
/// one per equal-width stratum, at a hashed offset inside it.
pub fn stratified_coords(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    (0..max)
        .map(|k| {
            let lo = k * len / max;
            let hi = (k + 1) * len / max;
            let mut z = (k as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ len as u64;
            z = (z ^ (z >> 31)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            lo + (z >> 11) as usize % (hi - lo)
        })
        .collect()
}

/// Compare `analytic` with central differences of `f` at `coords`.
pub fn finite_diff_grad(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    params: &[f64],
    analytic: &[f64],
    step: f64,
    coords: &[usize],
) -> Result<GradReport> {
    if analytic.len() != params.len() {
        return Err(arg_err("finite_diff_grad", "analytic gradient length differs"));
    }
    let mut p = params.to_vec();
    let mut errs = Vec::with_capacity(coords.len());
    for &c in coords {
        let orig = p[c];
        p[c] = orig + step;
        let up = f(&p)?;
        p[c] = orig - step;
        let down = f(&p)?;
        p[c] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(c));
        }
        errs.push(relative_error(analytic[c], (up - down) / (2.0 * step)));
    }
    GradReport::from_errors(errs)
}

/// Gradient agreement of one operator or module, per checked tensor.
#[derive(Debug, Clone, Serialize)]
pub struct OpCheck {
    pub name: String,
    pub tensors: Vec<(String, GradReport)>,
}

impl OpCheck {
    pub fn summary(&self) -> Result<GradReport> {
        GradReport::merge(self.tensors.iter().map(|(_, r)| r))
    }

    pub fn passes(&self) -> bool {
        self.summary()
            .map(|s| s.pass_fraction(GRAD_TOL) >= GRAD_PASS_FRACTION)
            .unwrap_or(false)
    }
}

struct NoParams;

impl Module<f64> for NoParams {
    fn collect_params<'a>(&'a self, _out: &mut Vec<&'a Param<f64>>) {}
    fn collect_params_mut<'a>(&'a mut self, _out: &mut Vec<&'a mut Param<f64>>) {}
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Scalar loss of a graph: the output itself, or its contraction with a
/// fixed random tensor.
fn scalarize(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    if tape.value(out).is_scalar() {
        return Ok(out);
    }
    let shape = tape.shape(out).to_vec();
    let w = random_tensor(&shape, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xabcd));
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Check a graph built by `build` against central differences, with respect
/// to each tensor in `inputs` and each parameter of `module`.
pub fn check_graph<M: Module<f64>>(
    name: &str,
    module: &mut M,
    inputs: Vec<(&str, Tensor<f64>)>,
    build: impl Fn(&mut Tape<f64>, &mut M, &[Var]) -> Result<Var>,
    step: f64,
    seed: u64,
) -> Result<OpCheck> {
    let eval = |module: &mut M, values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone(), true)).collect();
        let out = build(&mut tape, module, &vars)?;
        let loss = scalarize(&mut tape, out, seed)?;
        Ok(tape.value(loss).item())
    };
    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let out = build(&mut tape, module, &vars)?;
    let loss = scalarize(&mut tape, out, seed)?;
    let grads = tape.backward(loss)?;

    let mut tensors = Vec::new();
    for (i, (label, t)) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[i])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        let coords = stratified_coords(t.numel(), MAX_COORDS);
        let base = t.data().to_vec();
        let report = finite_diff_grad(
            |p| {
                values[i].data_mut().copy_from_slice(p);
                eval(module, &values)
            },
            &base,
            &analytic,
            step,
            &coords,
        )?;
        values[i].data_mut().copy_from_slice(&base);
        tensors.push((label.to_string(), report));
    }

    let param_count = module.params().len();
    for k in 0..param_count {
        let (pname, base, analytic) = {
            let p = module.params()[k];
            if !p.requires_grad {
                continue;
            }
            let analytic = grads
                .of(p)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; p.value.numel()]);
            (p.name.clone(), p.value.data().to_vec(), analytic)
        };
        let coords = stratified_coords(base.len(), MAX_COORDS);
        let report = finite_diff_grad(
            |p| {
                module.params_mut()[k].value.data_mut().copy_from_slice(p);
                eval(module, &values)
            },
            &base,
            &analytic,
            step,
            &coords,
        )?;
        module.params_mut()[k].value.data_mut().copy_from_slice(&base);
        tensors.push((pname, report));
    }
    Ok(OpCheck {
        name: name.to_string(),
        tensors,
    })
}

fn check_op(
    name: &str,
    inputs: Vec<(&str, Tensor<f64>)>,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    seed: u64,
) -> Result<OpCheck> {
    check_graph(name, &mut NoParams, inputs, |t, _, v| build(t, v), FD_STEP, seed)
}

/// Student and review units treated as one parameter set.
pub struct StudentWithUnits {
    pub student: Model<f64>,
    pub units: ReviewUnits<f64>,
}

impl Module<f64> for StudentWithUnits {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param<f64>>) {
        self.student.collect_params(out);
        self.units.collect_params(out);
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<f64>>) {
        self.student.collect_params_mut(out);
        self.units.collect_params_mut(out);
    }
}

/// The operator-level part of the gradient suite.
pub fn kernel_checks(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| random_tensor(shape, &mut rng);
    let mut out = Vec::new();

    out.push(check_op(
        "conv2d",
        vec![("input", r(&[2, 3, 6, 6])), ("kernel", r(&[4, 3, 3, 3])), ("bias", r(&[4]))],
        |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1),
        seed,
    )?);
    out.push(check_op(
        "conv2d_stride2",
        vec![("input", r(&[2, 3, 7, 7])), ("kernel", r(&[4, 3, 3, 3]))],
        |t, v| t.conv2d(v[0], v[1], None, 2, 1),
        seed,
    )?);
    out.push(check_op(
        "conv2d_1x1",
        vec![("input", r(&[2, 5, 4, 4])), ("kernel", r(&[3, 5, 1, 1]))],
        |t, v| t.conv2d(v[0], v[1], None, 1, 0),
        seed,
    )?);
    out.push(check_op(
        "batch_norm2d_train",
        vec![("input", r(&[3, 4, 3, 3])), ("gamma", r(&[4])), ("beta", r(&[4]))],
        |t, v| t.batch_norm2d(v[0], v[1], v[2], None, Mode::Train, BN_MOMENTUM, BN_EPS),
        seed,
    )?);
    let mut stats = RunningStats::<f64>::new(4);
    stats.mean = vec![0.1, -0.2, 0.3, 0.0];
    stats.var = vec![0.5, 1.5, 0.8, 2.0];
    out.push(check_op(
        "batch_norm2d_eval",
        vec![("input", r(&[2, 4, 3, 3])), ("gamma", r(&[4])), ("beta", r(&[4]))],
        move |t, v| {
            let mut s = stats.clone();
            t.batch_norm2d(v[0], v[1], v[2], Some(&mut s), Mode::Eval, BN_MOMENTUM, BN_EPS)
        },
        seed,
    )?);
    out.push(check_op("relu", vec![("x", r(&[2, 3, 4, 4]))], |t, v| Ok(t.relu(v[0])), seed)?);
    out.push(check_op(
        "sigmoid",
        vec![("x", r(&[2, 3, 4, 4]).map_values(|x| 4.0 * x))],
        |t, v| Ok(t.sigmoid(v[0])),
        seed,
    )?);
    out.push(check_op(
        "linear",
        vec![("x", r(&[3, 5])), ("weight", r(&[4, 5])), ("bias", r(&[4]))],
        |t, v| t.linear(v[0], v[1], Some(v[2])),
        seed,
    )?);
    out.push(check_op(
        "global_avg_pool",
        vec![("x", r(&[2, 3, 4, 4]))],
        |t, v| t.global_avg_pool(v[0]),
        seed,
    )?);
    out.push(check_op(
        "softmax_cross_entropy",
        vec![("logits", r(&[4, 6]).map_values(|x| 3.0 * x))],
        |t, v| t.softmax_cross_entropy(v[0], &[0, 5, 2, 2]),
        seed,
    )?);
    out.push(check_op(
        "interpolate_nearest",
        vec![("x", r(&[2, 3, 4, 4]))],
        |t, v| t.interpolate_nearest(v[0], 8, 8),
        seed,
    )?);
    out.push(check_op(
        "interpolate_nearest_uneven",
        vec![("x", r(&[1, 2, 3, 3]))],
        |t, v| t.interpolate_nearest(v[0], 5, 7),
        seed,
    )?);
    out.push(check_op(
        "adaptive_max_pool",
        vec![("x", r(&[2, 3, 8, 8]))],
        |t, v| t.adaptive_max_pool(v[0], 3),
        seed,
    )?);
    out.push(check_op(
        "adaptive_max_pool_even",
        vec![("x", r(&[2, 3, 8, 8]))],
        |t, v| t.adaptive_max_pool(v[0], 4),
        seed,
    )?);
    out.push(check_op("mse", vec![("a", r(&[2, 3, 4, 4])), ("b", r(&[2, 3, 4, 4]))], |t, v| t.mse(v[0], v[1]), seed)?);
    out.push(check_op("add", vec![("a", r(&[2, 3])), ("b", r(&[2, 3]))], |t, v| t.add(v[0], v[1]), seed)?);
    out.push(check_op("sub", vec![("a", r(&[2, 3])), ("b", r(&[2, 3]))], |t, v| t.sub(v[0], v[1]), seed)?);
    out.push(check_op("mul", vec![("a", r(&[2, 3])), ("b", r(&[2, 3]))], |t, v| t.mul(v[0], v[1]), seed)?);
    out.push(check_op(
        "mul_channel_broadcast",
        vec![("x", r(&[2, 3, 4, 4])), ("gate", r(&[2, 1, 4, 4]))],
        |t, v| t.mul_channel_broadcast(v[0], v[1]),
        seed,
    )?);
    out.push(check_op(
        "concat_channels",
        vec![("a", r(&[2, 2, 3, 3])), ("b", r(&[2, 3, 3, 3]))],
        |t, v| t.concat_channels(&[v[0], v[1]]),
        seed,
    )?);
    out.push(check_op(
        "narrow_channels",
        vec![("x", r(&[2, 5, 3, 3]))],
        |t, v| t.narrow_channels(v[0], 1, 3),
        seed,
    )?);
    out.push(check_op("scale", vec![("x", r(&[2, 3]))], |t, v| Ok(t.scale(v[0], -1.7)), seed)?);
    out.push(check_op("sum", vec![("x", r(&[2, 3, 2]))], |t, v| Ok(t.sum(v[0])), seed)?);
    Ok(out)
}

/// ABF unit, HCL, the one-stage review loss, the review loss of every other
/// ablation mode, and a ResNet8 student with the full review loss against a
/// frozen ResNet8 teacher.
pub fn module_checks(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51);
    let mut out = Vec::new();

    let mut unit = AbfUnit::<f64>::new("abf", 4, 6, 5, Some(Fusion::Attention), &mut rng)?;
    let s = random_tensor(&[2, 4, 6, 6], &mut rng);
    let res = random_tensor(&[2, 6, 3, 3], &mut rng);
    out.push(check_graph(
        "abf_unit",
        &mut unit,
        vec![("student", s), ("residual", res)],
        |t, u, v| {
            let o = u.forward(t, v[0], Some(v[1]))?;
            let a = t.sum(o.abf_out);
            let b = t.mul(o.residual_out, o.residual_out)?;
            let b = t.sum(b);
            t.add(a, b)
        },
        FD_STEP,
        seed,
    )?);

    let fused = random_tensor(&[2, 3, 8, 8], &mut rng);
    let teacher = random_tensor(&[2, 3, 8, 8], &mut rng);
    out.push(check_op(
        "hcl",
        vec![("fused", fused), ("teacher", teacher)],
        |t, v| hcl(t, v[0], v[1], &HclSpec::pyramid()),
        seed,
    )?);

    let mut one_stage = ReviewUnits::<f64>::build(AblationMode::Full, &[3], &[4], 5, seed)?;
    let s = random_tensor(&[2, 3, 4, 4], &mut rng);
    let t = random_tensor(&[2, 4, 4, 4], &mut rng);
    out.push(check_graph(
        "review_loss_one_stage",
        &mut one_stage,
        vec![("student", s)],
        |tape, u, v| {
            let tv = tape.constant(t.clone());
            let spec = HclSpec::parse("h,2,1", "1,0.5,0.25", true)?;
            Ok(review_loss(tape, &[v[0]], &[tv], u, &spec, AblationMode::Full)?.loss)
        },
        FD_STEP,
        seed,
    )?);

    let s_ch = [3usize, 4, 5];
    let t_ch = [2usize, 6, 4];
    let sizes = [16usize, 8, 4];
    let students: Vec<(&str, Tensor<f64>)> = ["s0", "s1", "s2"]
        .into_iter()
        .zip(s_ch.iter().zip(&sizes))
        .map(|(n, (&c, &h))| (n, random_tensor(&[2, c, h, h], &mut rng)))
        .collect();
    let teachers: Vec<Tensor<f64>> = t_ch
        .iter()
        .zip(&sizes)
        .map(|(&c, &h)| random_tensor(&[2, c, h, h], &mut rng))
        .collect();
    for mode in AblationMode::ALL.into_iter().filter(|&m| m != AblationMode::Full) {
        let mut units = ReviewUnits::<f64>::build(mode, &s_ch, &t_ch, 4, seed)?;
        let name: &'static str = match mode {
            AblationMode::BaselineL2 => "review_loss_baseline_l2",
            AblationMode::ReviewOnly => "review_loss_review_only",
            AblationMode::ReviewRlf => "review_loss_review_rlf",
            AblationMode::RlfAbf => "review_loss_rlf_abf",
            AblationMode::RlfHcl => "review_loss_rlf_hcl",
            AblationMode::Full => unreachable!(),
        };
        out.push(check_graph(
            name,
            &mut units,
            students.clone(),
            |tape, u, v| {
                let ts: Vec<Var> = teachers.iter().map(|t| tape.constant(t.clone())).collect();
                let spec = HclSpec::parse("h,2,1", "1,0.5,0.25", true)?;
                Ok(review_loss(tape, v, &ts, u, &spec, mode)?.loss)
            },
            FD_STEP,
            seed,
        )?);
    }

    out.push(resnet_review_check(seed)?);
    Ok(out)
}

fn resnet_review_check(seed: u64) -> Result<OpCheck> {
    let spec: ModelSpec = "resnet8:10".parse()?;
    let mut teacher = Model::<f64>::build(spec.clone(), seed ^ 0x7e)?;
    let student = Model::<f64>::build(spec, seed)?;
    let units = ReviewUnits::build(AblationMode::Full, &student.stage_channels(), &teacher.stage_channels(), 8, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a);
    let images = random_tensor(&[2, 3, 32, 32], &mut rng);
    let labels = [3usize, 7];
    let t_feats = teacher.forward_values(&images, Mode::Eval)?.stages;
    let mut pair = StudentWithUnits { student, units };
    check_graph(
        "resnet8_full_review",
        &mut pair,
        vec![],
        |tape, m, _| {
            let x = tape.constant(images.clone());
            let fs = m.student.forward_with_features(tape, x, Mode::Train)?;
            let ce = tape.softmax_cross_entropy(fs.logits, &labels)?;
            let ts: Vec<Var> = t_feats.iter().map(|f| tape.constant(f.clone())).collect();
            let kd = review_loss(tape, &fs.stages, &ts, &m.units, &HclSpec::pyramid(), AblationMode::Full)?.loss;
            tape.add(ce, kd)
        },
        FD_STEP,
        seed,
    )
}

/// Every gradient check, kernels first.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<OpCheck>> {
    let mut all = kernel_checks(seed)?;
    all.extend(module_checks(seed)?);
    Ok(all)
}

trait MapValues {
    fn map_values(self, f: impl Fn(f64) -> f64) -> Self;
}

impl MapValues for Tensor<f64> {
    fn map_values(mut self, f: impl Fn(f64) -> f64) -> Self {
        self.data_mut().iter_mut().for_each(|v| *v = f(*v));
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn naive_conv_ones_and_identity() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = conv2d_naive(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.data(), &[4.0; 4]);
        let x = Tensor::from_fn(&[1, 2, 3, 3], |i| i as f64);
        let id = Tensor::from_f64(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(conv2d_naive(&x, &id, None, 1, 0).unwrap(), x);
    }

    #[test]
    fn naive_conv_cap() {
        let x = Tensor::zeros(&[4, 1, 128, 128]);
        let k = Tensor::zeros(&[2, 1, 1, 1]);
        assert!(matches!(conv2d_naive(&x, &k, None, 1, 0), Err(Error::OracleCap(_))));
    }

    #[test]
    fn naive_pool_and_interp() {
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
        assert_eq!(adaptive_max_pool_naive(&x, 2).unwrap().data(), &[5.0, 7.0, 13.0, 15.0]);
        let y = interpolate_nearest_naive(&Tensor::from_fn(&[1, 1, 2, 2], |i| i as f64), 4, 4).unwrap();
        assert_eq!(y.data()[..4], [0.0, 0.0, 1.0, 1.0]);
        assert_eq!(nearest_source(2, 3, 6), 1);
        assert_eq!(nearest_source(6, 3, 7), 2);
    }

    #[test]
    fn naive_hcl_worked_example() {
        let f = Tensor::from_f64(&[1, 1, 2, 2], &[2.0, 0.0, 0.0, 0.0]).unwrap();
        let t = Tensor::zeros(&[1, 1, 2, 2]);
        let spec = HclSpec::parse("2,1", "1,0.5", true).unwrap();
        assert!((hcl_naive(&f, &t, &spec).unwrap() - 2.0).abs() < 1e-12);
        assert!((hcl_naive(&f, &t, &spec.with_normalize(false)).unwrap() - 3.0).abs() < 1e-12);
        assert!(hcl_naive(&f, &f, &HclSpec::pyramid()).is_err());
        let g = HclSpec::global_l2();
        assert_eq!(hcl_naive(&f, &t, &g).unwrap(), mse_naive(&f, &t).unwrap());
    }

    #[test]
    fn cross_entropy_uniform() {
        let l = Tensor::zeros(&[2, 4]);
        assert!((cross_entropy_naive(&l, &[0, 3]).unwrap() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn pair_counts() {
        assert_eq!(review_pairs(AblationMode::ReviewOnly, 3).len(), 6);
        assert_eq!(review_pairs(AblationMode::Full, 3), vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn square_sum_fd() {
        let p = [0.3, -1.2, 2.5, 0.0];
        let analytic: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
        let r = finite_diff_grad(|q| Ok(q.iter().map(|x| x * x).sum()), &p, &analytic, 1e-3, &[0, 1, 2, 3]).unwrap();
        assert!(r.max_rel_err < 1e-10, "{}", r.max_rel_err);
    }

    #[test]
    fn larger_step_grows_error() {
        let p = [0.7f64, -0.4];
        let f = |q: &[f64]| Ok(q.iter().map(|x| (3.0 * x).sin()).sum());
        let analytic: Vec<f64> = p.iter().map(|x: &f64| 3.0 * (3.0 * x).cos()).collect();
        let small = finite_diff_grad(f, &p, &analytic, 1e-4, &[0, 1]).unwrap();
        let large = finite_diff_grad(f, &p, &analytic, 1e-3, &[0, 1]).unwrap();
        assert!(large.max_rel_err > small.max_rel_err);
    }

    #[test]
    fn non_finite_rejected() {
        let r = finite_diff_grad(|q| Ok(q[0].ln()), &[0.0], &[1.0], 1e-3, &[0]);
        assert!(matches!(r, Err(Error::NonFinite(0))));
    }

    #[test]
    fn stratified_sampling() {
        assert_eq!(stratified_coords(5, 64), vec![0, 1, 2, 3, 4]);
        let c = stratified_coords(1000, 64);
        assert_eq!(c.len(), 64);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(c, stratified_coords(1000, 64));
    }
}
