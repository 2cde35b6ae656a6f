//! Parameterised building blocks shared by the networks and the review units.

use rand::Rng;

use crate::error::Result;
use crate::tensor::init::{kaiming_normal, uniform_fan_in};
use crate::tensor::kernels::{Mode, RunningStats, BN_EPS, BN_MOMENTUM};
use crate::tensor::{FanMode, Param, Real, Tape, Tensor, Var};

/// Named non-learnable state (batch-norm running statistics).
pub struct Buffer<'a, T> {
    pub name: String,
    pub data: &'a mut Vec<T>,
}

/// Anything owning parameters and buffers, visited in a fixed order.
pub trait Module<T: Real> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param<T>>);
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>);
    fn collect_buffers<'a>(&'a mut self, _out: &mut Vec<Buffer<'a, T>>) {}

    fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        self.collect_params(&mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        self.collect_params_mut(&mut out);
        out
    }

    fn buffers(&mut self) -> Vec<Buffer<'_, T>> {
        let mut out = Vec::new();
        self.collect_buffers(&mut out);
        out
    }

    /// Total number of trainable scalars.
    fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.value.numel()).sum()
    }

    /// Order-sensitive FNV-1a hash over the bits of every parameter.
    fn param_checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for p in self.params() {
            for v in p.value.data() {
                for b in v.as_f64().to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = Param::new(
            format!("{name}.weight"),
            kaiming_normal(&[c_out, c_in, kernel, kernel], FanMode::In, rng)?,
        );
        let bias = bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros(&[c_out])));
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.param(b));
        tape.conv2d(x, w, b, self.stride, self.padding)
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param<T>>) {
        out.push(&self.weight);
        out.extend(self.bias.as_ref());
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        out.push(&mut self.weight);
        out.extend(self.bias.as_mut());
    }
}

pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running: RunningStats<T>,
    pub momentum: f64,
    pub eps: f64,
    name: String,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running: RunningStats::new(channels),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            name: name.to_string(),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        tape.batch_norm2d(x, g, b, Some(&mut self.running), mode, self.momentum, self.eps)
    }
}

impl<T: Real> Module<T> for BatchNorm2d<T> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param<T>>) {
        out.push(&self.gamma);
        out.push(&self.beta);
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }

    fn collect_buffers<'a>(&'a mut self, out: &mut Vec<Buffer<'a, T>>) {
        out.push(Buffer {
            name: format!("{}.running_mean", self.name),
            data: &mut self.running.mean,
        });
        out.push(Buffer {
            name: format!("{}.running_var", self.name),
            data: &mut self.running.var,
        });
    }
}

pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, fin: usize, fout: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), uniform_fan_in(&[fout, fin], fin, rng)),
            bias: Param::new(format!("{name}.bias"), uniform_fan_in(&[fout], fin, rng)),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.linear(x, w, Some(b))
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param<T>>) {
        out.push(&self.weight);
        out.push(&self.bias);
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}
