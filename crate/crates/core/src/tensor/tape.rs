use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, BnSaved, Mode, RunningStats};
use super::{Real, Tensor};
use crate::error::{arg_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Process-unique identity of a [`Param`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(u64);

static NEXT_PARAM: AtomicU64 = AtomicU64::new(0);

/// A learnable tensor together with its gradient buffer.
#[derive(Debug)]
pub struct Param<T> {
    id: ParamId,
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub requires_grad: bool,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            id: ParamId(NEXT_PARAM.fetch_add(1, Ordering::Relaxed)),
            name: name.into(),
            value,
            grad: None,
            requires_grad: true,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

impl<T: Real> Clone for Param<T> {
    /// Clones get a fresh identity so they bind to distinct tape leaves.
    fn clone(&self) -> Self {
        let mut p = Param::new(self.name.clone(), self.value.clone());
        p.grad = self.grad.clone();
        p.requires_grad = self.requires_grad;
        p
    }
}

enum Op<T> {
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved<T>,
    },
    Relu(Var),
    Sigmoid(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    GlobalAvgPool(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Interpolate(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Mse(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulChannel {
        x: Var,
        gate: Var,
    },
    Concat(Vec<Var>),
    Narrow {
        input: Var,
        start: usize,
    },
    Scale(Var, T),
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Option<Op<T>>,
}

/// Define-by-run recording of one forward pass.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order. [`Tape::backward`] consumes the tape.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            params: HashMap::new(),
        }
    }

    /// A tape that never records backward rules; every value is a constant.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: requires_grad && self.grad_enabled,
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Bind a parameter as a leaf. Binding the same parameter twice returns
    /// the same variable so its gradient accumulates across uses.
    pub fn param(&mut self, p: &Param<T>) -> Var {
        if let Some(&v) = self.params.get(&p.id) {
            return v;
        }
        let v = self.leaf(p.value.clone(), p.requires_grad);
        self.params.insert(p.id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn take_value(&self, v: Var) -> Tensor<T> {
        self.nodes[v.0].value.clone()
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: impl FnOnce() -> Op<T>) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op: requires_grad.then(op),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let out = kernels::conv2d(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push(out, &inputs, || Op::Conv2d {
            input,
            kernel,
            bias,
            stride,
            padding,
        }))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: Option<&mut RunningStats<T>>,
        mode: Mode,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let (out, saved) = kernels::batch_norm2d(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            running,
            mode,
            momentum,
            eps,
        )?;
        Ok(self.push(out, &[input, gamma, beta], || Op::BatchNorm {
            input,
            gamma,
            beta,
            saved,
        }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = kernels::relu(self.value(x));
        self.push(out, &[x], || Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = kernels::sigmoid(self.value(x));
        self.push(out, &[x], || Op::Sigmoid(x))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let out = kernels::linear(self.value(input), self.value(weight), bias.map(|b| self.value(b)))?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(out, &inputs, || Op::Linear { input, weight, bias }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = kernels::global_avg_pool(self.value(x))?;
        Ok(self.push(out, &[x], || Op::GlobalAvgPool(x)))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (out, probs) = kernels::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(out, &[logits], || Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        }))
    }

    pub fn interpolate_nearest(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = kernels::interpolate_nearest(self.value(x), out_h, out_w)?;
        Ok(self.push(out, &[x], || Op::Interpolate(x)))
    }

    pub fn adaptive_max_pool(&mut self, x: Var, size: usize) -> Result<Var> {
        let (out, argmax) = kernels::adaptive_max_pool(self.value(x), size)?;
        Ok(self.push(out, &[x], || Op::MaxPool { input: x, argmax }))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::mse(self.value(a), self.value(b))?;
        Ok(self.push(out, &[a, b], || Op::Mse(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::zip_map("add", self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(out, &[a, b], || Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::zip_map("sub", self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(out, &[a, b], || Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::zip_map("mul", self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(out, &[a, b], || Op::Mul(a, b)))
    }

    pub fn mul_channel_broadcast(&mut self, x: Var, gate: Var) -> Result<Var> {
        let out = kernels::mul_channel_broadcast(self.value(x), self.value(gate))?;
        Ok(self.push(out, &[x, gate], || Op::MulChannel { x, gate }))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = kernels::concat_channels(&values)?;
        Ok(self.push(out, parts, || Op::Concat(parts.to_vec())))
    }

    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = kernels::narrow_channels(self.value(x), start, len)?;
        Ok(self.push(out, &[x], || Op::Narrow { input: x, start }))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = kernels::map(self.value(x), |v| v * factor);
        self.push(out, &[x], || Op::Scale(x, factor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, &[x], || Op::Sum(x))
    }

    /// Reverse-mode sweep from a scalar `loss`, consuming the tape.
    ///
    /// Returns gradients for every leaf that requires them; intermediate
    /// gradients are released as soon as they have been propagated.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(loss_value.shape(), T::one()));
        }
        let nodes = &self.nodes;

        for i in (0..=loss.0).rev() {
            let Some(op) = &nodes[i].op else { continue };
            let Some(g) = grads[i].take() else { continue };
            let needs = |v: Var| nodes[v.0].requires_grad;
            let val = |v: Var| &nodes[v.0].value;
            let mut acc = |v: Var, d: Tensor<T>| accumulate(&mut grads[v.0], d);

            match op {
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    padding,
                } => {
                    let cg = kernels::conv2d_backward(
                        val(*input),
                        val(*kernel),
                        *stride,
                        *padding,
                        &g,
                        needs(*input),
                        needs(*kernel),
                        bias.is_some_and(needs),
                    )?;
                    if let Some(d) = cg.input {
                        acc(*input, d);
                    }
                    if let Some(d) = cg.kernel {
                        acc(*kernel, d);
                    }
                    if let (Some(b), Some(d)) = (bias, cg.bias) {
                        acc(*b, d);
                    }
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    saved,
                } => {
                    let (dx, dg, db) = kernels::batch_norm2d_backward(val(*gamma), saved, &g)?;
                    if needs(*input) {
                        acc(*input, dx);
                    }
                    if needs(*gamma) {
                        acc(*gamma, dg);
                    }
                    if needs(*beta) {
                        acc(*beta, db);
                    }
                }
                Op::Relu(x) => acc(*x, kernels::relu_backward(&nodes[i].value, &g)),
                Op::Sigmoid(x) => acc(*x, kernels::sigmoid_backward(&nodes[i].value, &g)),
                Op::Linear { input, weight, bias } => {
                    let (dx, dw, db) = kernels::linear_backward(val(*input), val(*weight), &g)?;
                    if needs(*input) {
                        acc(*input, dx);
                    }
                    if needs(*weight) {
                        acc(*weight, dw);
                    }
                    if let Some(b) = bias.filter(|&b| needs(b)) {
                        acc(b, db);
                    }
                }
                Op::GlobalAvgPool(x) => {
                    acc(*x, kernels::global_avg_pool_backward(val(*x).shape(), &g)?);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let d = kernels::softmax_cross_entropy_backward(val(*logits).shape(), probs, labels, g.item())?;
                    acc(*logits, d);
                }
                Op::Interpolate(x) => {
                    acc(*x, kernels::interpolate_nearest_backward(val(*x).shape(), &g)?);
                }
                Op::MaxPool { input, argmax } => {
                    acc(*input, kernels::adaptive_max_pool_backward(val(*input).shape(), argmax, &g)?);
                }
                Op::Mse(a, b) => {
                    let da = kernels::mse_backward(val(*a), val(*b), g.item());
                    if needs(*b) {
                        acc(*b, kernels::map(&da, |v| -v));
                    }
                    if needs(*a) {
                        acc(*a, da);
                    }
                }
                Op::Add(a, b) => {
                    if needs(*a) {
                        acc(*a, g.clone());
                    }
                    if needs(*b) {
                        acc(*b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*b) {
                        acc(*b, kernels::map(&g, |v| -v));
                    }
                    if needs(*a) {
                        acc(*a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        acc(*a, kernels::zip_map("mul_backward", &g, val(*b), |x, y| x * y)?);
                    }
                    if needs(*b) {
                        acc(*b, kernels::zip_map("mul_backward", &g, val(*a), |x, y| x * y)?);
                    }
                }
                Op::MulChannel { x, gate } => {
                    let (dx, dg) = kernels::mul_channel_broadcast_backward(val(*x), val(*gate), &g)?;
                    if needs(*x) {
                        acc(*x, dx);
                    }
                    if needs(*gate) {
                        acc(*gate, dg);
                    }
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let len = val(p).shape()[1];
                        if needs(p) {
                            acc(p, kernels::narrow_channels(&g, start, len)?);
                        }
                        start += len;
                    }
                }
                Op::Narrow { input, start } => {
                    acc(*input, kernels::narrow_channels_backward(val(*input).shape(), *start, &g)?);
                }
                Op::Scale(x, factor) => {
                    let f = *factor;
                    acc(*x, kernels::map(&g, |v| v * f));
                }
                Op::Sum(x) => {
                    let gv = g.item();
                    acc(*x, Tensor::full(val(*x).shape(), gv));
                }
            }
        }

        // Only leaves keep their gradients.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.op.is_some() || !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            params: self.params,
        })
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, d: Tensor<T>) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(d.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(d),
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn of(&self, p: &Param<T>) -> Option<&Tensor<T>> {
        self.params.get(&p.id).and_then(|&v| self.wrt(v))
    }

    /// Write gradients into the `grad` buffers of `params`, accumulating onto
    /// any existing buffer. Parameters that do not require gradients are left
    /// untouched.
    pub fn apply_to<'a>(&self, params: impl IntoIterator<Item = &'a mut Param<T>>) -> Result<()> {
        for p in params {
            if !p.requires_grad {
                continue;
            }
            if let Some(g) = self.of(p) {
                if g.shape() != p.value.shape() {
                    return Err(arg_err("apply_to", format!("gradient shape for {} differs", p.name)));
                }
                accumulate(&mut p.grad, g.clone());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(x).unwrap().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn frozen_param_gets_no_grad() {
        let mut frozen = Param::new("w", Tensor::<f64>::full(&[2], 3.0));
        frozen.requires_grad = false;
        let mut live = Param::new("v", Tensor::<f64>::full(&[2], 1.0));
        let mut tape = Tape::new();
        let a = tape.param(&frozen);
        let b = tape.param(&live);
        let y = tape.mul(a, b).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        g.apply_to([&mut frozen, &mut live]).unwrap();
        assert!(frozen.grad.is_none());
        assert_eq!(live.grad.unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn no_grad_tape_records_nothing() {
        let p = Param::new("w", Tensor::<f32>::full(&[2], 1.0));
        let mut tape = Tape::no_grad();
        let a = tape.param(&p);
        let y = tape.relu(a);
        assert!(!tape.requires_grad(y));
    }

    #[test]
    fn binding_twice_shares_leaf() {
        let p = Param::new("w", Tensor::<f64>::full(&[1], 2.0));
        let mut tape = Tape::new();
        let a = tape.param(&p);
        let b = tape.param(&p);
        assert_eq!(a, b);
        let y = tape.mul(a, b).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.of(&p).unwrap().data(), &[4.0]);
    }
}
