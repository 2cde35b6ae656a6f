//! CIFAR ResNet and Wide-ResNet networks with per-stage feature taps.

pub mod layers;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::kernels::Mode;
use crate::tensor::{Param, Real, Tape, Tensor, Var};
pub use layers::{BatchNorm2d, Buffer, Conv2d, Linear, Module};

pub const BASE_CHANNELS: [usize; 3] = [16, 32, 64];
pub const INPUT_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Resnet,
    Wrn,
}

/// Architecture description, written `resnet20`, `resnet8x4` or `wrn16-2`,
/// optionally suffixed with `:<num_classes>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelSpec {
    pub family: Family,
    pub depth: usize,
    pub width_factor: usize,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn resnet(depth: usize, width_factor: usize, num_classes: usize) -> Self {
        Self {
            family: Family::Resnet,
            depth,
            width_factor,
            num_classes,
        }
    }

    pub fn wrn(depth: usize, width_factor: usize, num_classes: usize) -> Self {
        Self {
            family: Family::Wrn,
            depth,
            width_factor,
            num_classes,
        }
    }

    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::ModelSpec {
                spec: self.name(),
                reason,
            })
        };
        if self.width_factor == 0 {
            return fail("width factor must be at least 1".into());
        }
        if self.num_classes < 2 {
            return fail("need at least 2 classes".into());
        }
        match self.family {
            Family::Resnet if self.depth < 8 || (self.depth - 2) % 6 != 0 => {
                fail("resnet depth must satisfy (depth - 2) % 6 == 0 with depth >= 8".into())
            }
            Family::Wrn if self.depth < 10 || (self.depth - 4) % 6 != 0 => {
                fail("wrn depth must satisfy (depth - 4) % 6 == 0 with depth >= 10".into())
            }
            _ => Ok(()),
        }
    }

    pub fn blocks_per_group(&self) -> usize {
        match self.family {
            Family::Resnet => (self.depth - 2) / 6,
            Family::Wrn => (self.depth - 4) / 6,
        }
    }

    pub fn stage_channels(&self) -> [usize; 3] {
        BASE_CHANNELS.map(|c| c * self.width_factor)
    }

    /// Canonical name without the class count.
    pub fn name(&self) -> String {
        match (self.family, self.width_factor) {
            (Family::Resnet, 1) => format!("resnet{}", self.depth),
            (Family::Resnet, w) => format!("resnet{}x{w}", self.depth),
            (Family::Wrn, w) => format!("wrn{}-{w}", self.depth),
        }
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.name(), self.num_classes)
    }
}

impl FromStr for ModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |reason: &str| Error::ModelSpec {
            spec: s.to_string(),
            reason: reason.to_string(),
        };
        let lower = s.trim().to_ascii_lowercase();
        let (arch, classes) = match lower.split_once(':') {
            Some((a, c)) => (a, c.parse().map_err(|_| bad("class count is not an integer"))?),
            None => (lower.as_str(), 100),
        };
        let num = |t: &str| t.parse::<usize>().map_err(|_| bad("expected resnet<D>[x<W>] or wrn<D>-<W>"));
        let spec = if let Some(rest) = arch.strip_prefix("resnet") {
            match rest.split_once('x') {
                Some((d, w)) => ModelSpec::resnet(num(d)?, num(w)?, classes),
                None => ModelSpec::resnet(num(rest)?, 1, classes),
            }
        } else if let Some(rest) = arch.strip_prefix("wrn") {
            let rest = rest.trim_start_matches(['-', '_']);
            let (d, w) = rest
                .split_once(['-', '_'])
                .ok_or_else(|| bad("expected wrn<D>-<W>"))?;
            ModelSpec::wrn(num(d)?, num(w)?, classes)
        } else {
            return Err(bad("expected resnet<D>[x<W>] or wrn<D>-<W>"));
        };
        spec.validate().map_err(|e| match e {
            Error::ModelSpec { reason, .. } => Error::ModelSpec {
                spec: s.to_string(),
                reason,
            },
            other => other,
        })?;
        Ok(spec)
    }
}

impl Serialize for ModelSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ModelSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Post-activation basic block (ResNet).
struct BasicBlock<T> {
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    shortcut: Option<(Conv2d<T>, BatchNorm2d<T>)>,
}

/// Pre-activation block (Wide-ResNet).
struct PreActBlock<T> {
    bn1: BatchNorm2d<T>,
    conv1: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    conv2: Conv2d<T>,
    shortcut: Option<Conv2d<T>>,
}

enum Block<T> {
    Basic(BasicBlock<T>),
    PreAct(PreActBlock<T>),
}

impl<T: Real> Block<T> {
    fn new(family: Family, name: &str, c_in: usize, c_out: usize, stride: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let needs_proj = stride != 1 || c_in != c_out;
        Ok(match family {
            Family::Resnet => Block::Basic(BasicBlock {
                conv1: Conv2d::new(&format!("{name}.conv1"), c_in, c_out, 3, stride, 1, false, rng)?,
                bn1: BatchNorm2d::new(&format!("{name}.bn1"), c_out),
                conv2: Conv2d::new(&format!("{name}.conv2"), c_out, c_out, 3, 1, 1, false, rng)?,
                bn2: BatchNorm2d::new(&format!("{name}.bn2"), c_out),
                shortcut: if needs_proj {
                    Some((
                        Conv2d::new(&format!("{name}.shortcut.conv"), c_in, c_out, 1, stride, 0, false, rng)?,
                        BatchNorm2d::new(&format!("{name}.shortcut.bn"), c_out),
                    ))
                } else {
                    None
                },
            }),
            Family::Wrn => Block::PreAct(PreActBlock {
                bn1: BatchNorm2d::new(&format!("{name}.bn1"), c_in),
                conv1: Conv2d::new(&format!("{name}.conv1"), c_in, c_out, 3, stride, 1, false, rng)?,
                bn2: BatchNorm2d::new(&format!("{name}.bn2"), c_out),
                conv2: Conv2d::new(&format!("{name}.conv2"), c_out, c_out, 3, 1, 1, false, rng)?,
                shortcut: if needs_proj {
                    Some(Conv2d::new(&format!("{name}.shortcut"), c_in, c_out, 1, stride, 0, false, rng)?)
                } else {
                    None
                },
            }),
        })
    }

    fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        match self {
            Block::Basic(b) => {
                let h = b.conv1.forward(tape, x)?;
                let h = b.bn1.forward(tape, h, mode)?;
                let h = tape.relu(h);
                let h = b.conv2.forward(tape, h)?;
                let h = b.bn2.forward(tape, h, mode)?;
                let sc = match &mut b.shortcut {
                    Some((conv, bn)) => {
                        let s = conv.forward(tape, x)?;
                        bn.forward(tape, s, mode)?
                    }
                    None => x,
                };
                let sum = tape.add(h, sc)?;
                Ok(tape.relu(sum))
            }
            Block::PreAct(b) => {
                let a = b.bn1.forward(tape, x, mode)?;
                let a = tape.relu(a);
                let sc = match &b.shortcut {
                    Some(conv) => conv.forward(tape, a)?,
                    None => x,
                };
                let h = b.conv1.forward(tape, a)?;
                let h = b.bn2.forward(tape, h, mode)?;
                let h = tape.relu(h);
                let h = b.conv2.forward(tape, h)?;
                tape.add(h, sc)
            }
        }
    }
}

impl<T: Real> Module<T> for Block<T> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param<T>>) {
        match self {
            Block::Basic(b) => {
                b.conv1.collect_params(out);
                b.bn1.collect_params(out);
                b.conv2.collect_params(out);
                b.bn2.collect_params(out);
                if let Some((c, n)) = &b.shortcut {
                    c.collect_params(out);
                    n.collect_params(out);
                }
            }
            Block::PreAct(b) => {
                b.bn1.collect_params(out);
                b.conv1.collect_params(out);
                b.bn2.collect_params(out);
                b.conv2.collect_params(out);
                if let Some(c) = &b.shortcut {
                    c.collect_params(out);
                }
            }
        }
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        match self {
            Block::Basic(b) => {
                b.conv1.collect_params_mut(out);
                b.bn1.collect_params_mut(out);
                b.conv2.collect_params_mut(out);
                b.bn2.collect_params_mut(out);
                if let Some((c, n)) = &mut b.shortcut {
                    c.collect_params_mut(out);
                    n.collect_params_mut(out);
                }
            }
            Block::PreAct(b) => {
                b.bn1.collect_params_mut(out);
                b.conv1.collect_params_mut(out);
                b.bn2.collect_params_mut(out);
                b.conv2.collect_params_mut(out);
                if let Some(c) = &mut b.shortcut {
                    c.collect_params_mut(out);
                }
            }
        }
    }

    fn collect_buffers<'a>(&'a mut self, out: &mut Vec<Buffer<'a, T>>) {
        match self {
            Block::Basic(b) => {
                b.bn1.collect_buffers(out);
                b.bn2.collect_buffers(out);
                if let Some((_, n)) = &mut b.shortcut {
                    n.collect_buffers(out);
                }
            }
            Block::PreAct(b) => {
                b.bn1.collect_buffers(out);
                b.bn2.collect_buffers(out);
            }
        }
    }
}

/// Tapped activations of one forward pass.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    /// Group outputs, shallow to deep.
    pub stages: Vec<Var>,
    /// Globally pooled feature `[n, c]`.
    pub embedding: Var,
    pub logits: Var,
}

/// Concrete tensors of a [`FeatureSet`], detached from any tape.
#[derive(Debug, Clone)]
pub struct FeatureValues<T> {
    pub stages: Vec<Tensor<T>>,
    pub embedding: Tensor<T>,
    pub logits: Tensor<T>,
}

pub struct Model<T> {
    spec: ModelSpec,
    stem: Conv2d<T>,
    stem_bn: Option<BatchNorm2d<T>>,
    groups: Vec<Vec<Block<T>>>,
    head_bn: Option<BatchNorm2d<T>>,
    fc: Linear<T>,
}

impl<T: Real> Model<T> {
    /// Build a network with deterministic He-normal initialization.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let channels = spec.stage_channels();
        let stem_out = match spec.family {
            Family::Resnet => channels[0],
            Family::Wrn => BASE_CHANNELS[0],
        };
        let stem = Conv2d::new("stem.conv", 3, stem_out, 3, 1, 1, false, &mut rng)?;
        let stem_bn = (spec.family == Family::Resnet).then(|| BatchNorm2d::new("stem.bn", stem_out));
        let mut groups = Vec::with_capacity(3);
        let mut c_in = stem_out;
        for (g, &c_out) in channels.iter().enumerate() {
            let mut blocks = Vec::with_capacity(spec.blocks_per_group());
            for b in 0..spec.blocks_per_group() {
                let stride = if g > 0 && b == 0 { 2 } else { 1 };
                let name = format!("group{g}.block{b}");
                blocks.push(Block::new(spec.family, &name, c_in, c_out, stride, &mut rng)?);
                c_in = c_out;
            }
            groups.push(blocks);
        }
        let head_bn = (spec.family == Family::Wrn).then(|| BatchNorm2d::new("head.bn", c_in));
        let fc = Linear::new("fc", c_in, spec.num_classes, &mut rng);
        Ok(Self {
            spec,
            stem,
            stem_bn,
            groups,
            head_bn,
            fc,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        self.spec.stage_channels().to_vec()
    }

    /// Forward pass recording on `tape`; `input` must be `[n, 3, 32, 32]`.
    pub fn forward_with_features(&mut self, tape: &mut Tape<T>, input: Var, mode: Mode) -> Result<FeatureSet> {
        let shape = tape.shape(input);
        if shape.len() != 4 || shape[1..] != [3, INPUT_SIZE, INPUT_SIZE] {
            return Err(shape_err(
                "forward_with_features",
                format!("expected [n, 3, 32, 32], got {shape:?}"),
            ));
        }
        let mut h = self.stem.forward(tape, input)?;
        if let Some(bn) = &mut self.stem_bn {
            h = bn.forward(tape, h, mode)?;
            h = tape.relu(h);
        }
        let mut stages = Vec::with_capacity(self.groups.len());
        for group in &mut self.groups {
            for block in group {
                h = block.forward(tape, h, mode)?;
            }
            stages.push(h);
        }
        if let Some(bn) = &mut self.head_bn {
            h = bn.forward(tape, h, mode)?;
            h = tape.relu(h);
        }
        let embedding = tape.global_avg_pool(h)?;
        let logits = self.fc.forward(tape, embedding)?;
        Ok(FeatureSet {
            stages,
            embedding,
            logits,
        })
    }

    /// Gradient-free forward pass returning concrete feature tensors.
    pub fn forward_values(&mut self, input: &Tensor<T>, mode: Mode) -> Result<FeatureValues<T>> {
        let mut tape = Tape::no_grad();
        let x = tape.constant(input.clone());
        let fs = self.forward_with_features(&mut tape, x, mode)?;
        Ok(FeatureValues {
            stages: fs.stages.iter().map(|&v| tape.take_value(v)).collect(),
            embedding: tape.take_value(fs.embedding),
            logits: tape.take_value(fs.logits),
        })
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        for p in self.params_mut() {
            p.requires_grad = requires_grad;
        }
    }

    /// Checksum over parameters and running statistics.
    pub fn checksum(&mut self) -> u64 {
        let mut h = self.param_checksum();
        for b in self.buffers() {
            for v in b.data.iter() {
                h ^= v.as_f64().to_bits();
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

impl<T: Real> Module<T> for Model<T> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param<T>>) {
        self.stem.collect_params(out);
        if let Some(bn) = &self.stem_bn {
            bn.collect_params(out);
        }
        for b in self.groups.iter().flatten() {
            b.collect_params(out);
        }
        if let Some(bn) = &self.head_bn {
            bn.collect_params(out);
        }
        self.fc.collect_params(out);
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        self.stem.collect_params_mut(out);
        if let Some(bn) = &mut self.stem_bn {
            bn.collect_params_mut(out);
        }
        for b in self.groups.iter_mut().flatten() {
            b.collect_params_mut(out);
        }
        if let Some(bn) = &mut self.head_bn {
            bn.collect_params_mut(out);
        }
        self.fc.collect_params_mut(out);
    }

    fn collect_buffers<'a>(&'a mut self, out: &mut Vec<Buffer<'a, T>>) {
        if let Some(bn) = &mut self.stem_bn {
            bn.collect_buffers(out);
        }
        for b in self.groups.iter_mut().flatten() {
            b.collect_buffers(out);
        }
        if let Some(bn) = &mut self.head_bn {
            bn.collect_buffers(out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_params(c_in: usize, c_out: usize, k: usize) -> usize {
        c_in * c_out * k * k
    }

    #[test]
    fn parses_spec_strings() {
        let s: ModelSpec = "resnet8x4".parse().unwrap();
        assert_eq!(s, ModelSpec::resnet(8, 4, 100));
        let s: ModelSpec = "wrn16-2:10".parse().unwrap();
        assert_eq!(s, ModelSpec::wrn(16, 2, 10));
        assert_eq!("WRN-40-1".parse::<ModelSpec>().unwrap().name(), "wrn40-1");
        let round: ModelSpec = s.to_string().parse().unwrap();
        assert_eq!(round, s);
    }

    #[test]
    fn invalid_depth_names_rule() {
        let msg = "resnet21".parse::<ModelSpec>().unwrap_err().to_string();
        assert!(msg.contains("(depth - 2) % 6 == 0"), "{msg}");
        let msg = "wrn15-2".parse::<ModelSpec>().unwrap_err().to_string();
        assert!(msg.contains("(depth - 4) % 6 == 0"), "{msg}");
        assert!(Model::<f32>::build(ModelSpec::resnet(21, 1, 10), 0).is_err());
    }

    #[test]
    fn channel_plans() {
        assert_eq!(ModelSpec::resnet(20, 1, 100).stage_channels(), [16, 32, 64]);
        assert_eq!(ModelSpec::resnet(20, 1, 100).blocks_per_group(), 3);
        assert_eq!(ModelSpec::resnet(8, 4, 100).stage_channels(), [64, 128, 256]);
        let w = ModelSpec::wrn(16, 2, 100);
        assert_eq!(w.stage_channels(), [32, 64, 128]);
        assert_eq!(w.blocks_per_group(), 2);
    }

    #[test]
    fn resnet20_parameter_count_closed_form() {
        let m = Model::<f32>::build(ModelSpec::resnet(20, 1, 100), 0).unwrap();
        // stem conv + bn
        let mut expected = conv_params(3, 16, 3) + 2 * 16;
        let chans = [16, 32, 64];
        let mut c_in = 16;
        for &c in &chans {
            for b in 0..3 {
                expected += conv_params(c_in, c, 3) + 2 * c + conv_params(c, c, 3) + 2 * c;
                if b == 0 && c_in != c {
                    expected += conv_params(c_in, c, 1) + 2 * c;
                }
                c_in = c;
            }
        }
        expected += 64 * 100 + 100;
        assert_eq!(m.parameter_count(), expected);
    }

    #[test]
    fn parameter_count_monotone() {
        let p = |s: &str| Model::<f32>::build(s.parse().unwrap(), 0).unwrap().parameter_count();
        assert!(p("resnet56") > p("resnet20"));
        assert!(p("wrn16-2") > p("wrn16-1"));
    }

    #[test]
    fn feature_shapes_resnet20() {
        let mut m = Model::<f32>::build(ModelSpec::resnet(20, 1, 100), 1).unwrap();
        let x = Tensor::from_fn(&[2, 3, 32, 32], |i| ((i % 17) as f32 - 8.0) / 8.0);
        let fv = m.forward_values(&x, Mode::Train).unwrap();
        let shapes: Vec<_> = fv.stages.iter().map(|s| s.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![2, 16, 32, 32], vec![2, 32, 16, 16], vec![2, 64, 8, 8]]);
        assert_eq!(fv.logits.shape(), &[2, 100]);
        assert_eq!(fv.embedding.shape(), &[2, 64]);
    }

    #[test]
    fn feature_shapes_resnet8x4_and_wrn() {
        let x = Tensor::<f32>::zeros(&[1, 3, 32, 32]);
        let mut m = Model::<f32>::build(ModelSpec::resnet(8, 4, 10), 1).unwrap();
        let fv = m.forward_values(&x, Mode::Eval).unwrap();
        let shapes: Vec<_> = fv.stages.iter().map(|s| s.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![1, 64, 32, 32], vec![1, 128, 16, 16], vec![1, 256, 8, 8]]);
        let mut w = Model::<f32>::build(ModelSpec::wrn(16, 2, 10), 1).unwrap();
        let fv = w.forward_values(&x, Mode::Eval).unwrap();
        let shapes: Vec<_> = fv.stages.iter().map(|s| s.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![1, 32, 32, 32], vec![1, 64, 16, 16], vec![1, 128, 8, 8]]);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut m = Model::<f32>::build(ModelSpec::resnet(8, 1, 10), 3).unwrap();
        let x = Tensor::from_fn(&[2, 3, 32, 32], |i| (i as f32 * 0.37).sin());
        let a = m.forward_values(&x, Mode::Eval).unwrap().logits;
        let b = m.forward_values(&x, Mode::Eval).unwrap().logits;
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let mut m = Model::<f32>::build(ModelSpec::resnet(8, 1, 10), 3).unwrap();
        let x = Tensor::zeros(&[1, 3, 16, 16]);
        assert!(m.forward_values(&x, Mode::Eval).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Model::<f32>::build(ModelSpec::resnet(8, 1, 10), 5).unwrap();
        let b = Model::<f32>::build(ModelSpec::resnet(8, 1, 10), 5).unwrap();
        let c = Model::<f32>::build(ModelSpec::resnet(8, 1, 10), 6).unwrap();
        assert_eq!(a.param_checksum(), b.param_checksum());
        assert_ne!(a.param_checksum(), c.param_checksum());
    }
}
