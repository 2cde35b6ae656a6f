//! CIFAR binary ingestion, augmentation, batching and a synthetic dataset.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::tensor::{Real, Tensor};

pub const IMAGE_SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const PIXELS: usize = CHANNELS * IMAGE_SIDE * IMAGE_SIDE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Cifar10,
    Cifar100,
}

impl Variant {
    pub fn num_classes(self) -> usize {
        match self {
            Variant::Cifar10 => 10,
            Variant::Cifar100 => 100,
        }
    }

    /// Bytes per record: label byte(s) followed by the pixels.
    pub fn record_len(self) -> usize {
        self.label_bytes() + PIXELS
    }

    fn label_bytes(self) -> usize {
        match self {
            Variant::Cifar10 => 1,
            Variant::Cifar100 => 2,
        }
    }

    pub fn files(self, split: Split) -> Vec<&'static str> {
        match (self, split) {
            (Variant::Cifar10, Split::Train) => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            (Variant::Cifar10, Split::Test) => vec!["test_batch.bin"],
            (Variant::Cifar100, Split::Train) => vec!["train.bin"],
            (Variant::Cifar100, Split::Test) => vec!["test.bin"],
        }
    }

    /// Directory name used by the official archives.
    fn archive_dir(self) -> &'static str {
        match self {
            Variant::Cifar10 => "cifar-10-batches-bin",
            Variant::Cifar100 => "cifar-100-binary",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Cifar10 => "cifar10",
            Variant::Cifar100 => "cifar100",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "cifar10" => Ok(Variant::Cifar10),
            "cifar100" => Ok(Variant::Cifar100),
            _ => Err(arg_err("dataset", format!("`{s}` is not cifar10 or cifar100"))),
        }
    }
}

/// Images stored as raw bytes, `[N, 3, 32, 32]` channel-planar.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub num_classes: usize,
    images: Vec<u8>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, split: Split, num_classes: usize, images: Vec<u8>, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(arg_err("dataset", "no samples"));
        }
        if images.len() != labels.len() * PIXELS {
            return Err(arg_err(
                "dataset",
                format!("{} image bytes for {} labels", images.len(), labels.len()),
            ));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(arg_err("dataset", format!("label {l} outside 0..{num_classes}")));
        }
        Ok(Self {
            name: name.into(),
            split,
            num_classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * PIXELS..(i + 1) * PIXELS]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &[u8] {
        &self.images
    }

    /// First `n` samples in a class-balanced order determined by `seed`.
    ///
    /// Classes are interleaved round-robin so that any prefix is as balanced
    /// as the source allows.
    pub fn subset(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 || n > self.len() {
            return Err(arg_err("subset", format!("cannot take {n} of {} samples", self.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        for c in &mut by_class {
            c.shuffle(&mut rng);
        }
        let mut picked = Vec::with_capacity(n);
        let mut round = 0;
        while picked.len() < n {
            for c in &by_class {
                if let Some(&i) = c.get(round) {
                    picked.push(i);
                    if picked.len() == n {
                        break;
                    }
                }
            }
            round += 1;
        }
        picked.sort_unstable();
        Ok(self.select(&picked))
    }

    fn select(&self, idx: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(idx.len() * PIXELS);
        for &i in idx {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            name: self.name.clone(),
            split: self.split,
            num_classes: self.num_classes,
            images,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Per-channel mean and standard deviation of pixels scaled to [0, 1].
    pub fn channel_stats(&self) -> ([f64; 3], [f64; 3]) {
        let plane = IMAGE_SIDE * IMAGE_SIDE;
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        for img in self.images.chunks_exact(PIXELS) {
            for c in 0..CHANNELS {
                for &p in &img[c * plane..(c + 1) * plane] {
                    let v = p as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let count = (self.len() * plane) as f64;
        let mean = sum.map(|s| s / count);
        let std = [0, 1, 2].map(|c| (sq[c] / count - mean[c] * mean[c]).max(0.0).sqrt());
        (mean, std)
    }
}

fn find_file(dir: &Path, variant: Variant, name: &str) -> Option<PathBuf> {
    [dir.join(name), dir.join(variant.archive_dir()).join(name)]
        .into_iter()
        .find(|p| p.is_file())
}

/// Load a split from the standard binary distribution in `dir` (or its
/// `cifar-10-batches-bin` / `cifar-100-binary` subdirectory).
pub fn load_cifar(dir: &Path, variant: Variant, split: Split) -> Result<Dataset> {
    let rec = variant.record_len();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for name in variant.files(split) {
        let path = find_file(dir, variant, name).ok_or_else(|| Error::MissingFile(dir.join(name)))?;
        let bytes = fs::read(&path)?;
        if bytes.len() % rec != 0 || bytes.is_empty() {
            let whole = bytes.len() / rec;
            return Err(Error::CorruptDataset {
                path,
                detail: format!(
                    "{} bytes is not a multiple of the {rec}-byte record; truncated record starts at offset {}",
                    bytes.len(),
                    whole * rec
                ),
            });
        }
        for (k, r) in bytes.chunks_exact(rec).enumerate() {
            let label = r[variant.label_bytes() - 1] as usize;
            if label >= variant.num_classes() {
                return Err(Error::CorruptDataset {
                    path,
                    detail: format!("label {label} at offset {} exceeds {} classes", k * rec, variant.num_classes()),
                });
            }
            labels.push(label);
            images.extend_from_slice(&r[variant.label_bytes()..]);
        }
    }
    Dataset::new(variant.name(), split, variant.num_classes(), images, labels)
}

/// Write `ds` in the binary record format. The coarse label byte of
/// cifar100 records is written as zero.
pub fn write_cifar(ds: &Dataset, variant: Variant, path: &Path) -> Result<()> {
    if ds.num_classes > variant.num_classes() {
        return Err(arg_err(
            "write_cifar",
            format!("{} classes do not fit {variant}", ds.num_classes),
        ));
    }
    let mut out = Vec::with_capacity(ds.len() * variant.record_len());
    for i in 0..ds.len() {
        if variant == Variant::Cifar100 {
            out.push(0);
        }
        out.push(ds.labels[i] as u8);
        out.extend_from_slice(ds.image(i));
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub normalize_mean: [f64; 3],
    pub normalize_std: [f64; 3],
    pub flip_prob: f64,
    pub crop_padding: usize,
}

impl AugmentPolicy {
    pub fn new(mean: [f64; 3], std: [f64; 3], flip_prob: f64, crop_padding: usize) -> Result<Self> {
        if std.iter().any(|&s| !(s > 0.0)) {
            return Err(arg_err("augment policy", format!("std {std:?} must be positive")));
        }
        if !(0.0..=1.0).contains(&flip_prob) {
            return Err(arg_err("augment policy", format!("flip probability {flip_prob} outside [0, 1]")));
        }
        Ok(Self {
            normalize_mean: mean,
            normalize_std: std,
            flip_prob,
            crop_padding,
        })
    }

    pub fn cifar10() -> Self {
        Self::new([0.4914, 0.4822, 0.4465], [0.2470, 0.2435, 0.2616], 0.5, 4).expect("valid constants")
    }

    pub fn cifar100() -> Self {
        Self::new([0.5071, 0.4865, 0.4409], [0.2673, 0.2564, 0.2762], 0.5, 4).expect("valid constants")
    }

    pub fn for_variant(v: Variant) -> Self {
        match v {
            Variant::Cifar10 => Self::cifar10(),
            Variant::Cifar100 => Self::cifar100(),
        }
    }

    /// Same normalization, no flips or crops.
    pub fn eval(&self) -> Self {
        Self {
            flip_prob: 0.0,
            crop_padding: 0,
            ..self.clone()
        }
    }
}

/// Random crop from the zero-padded image, horizontal flip, scale and
/// normalize. Writes `3*32*32` values into `out`.
pub fn augment_into<T: Real, R: Rng + ?Sized>(image: &[u8], policy: &AugmentPolicy, rng: &mut R, out: &mut [T]) {
    assert_eq!(image.len(), PIXELS, "image must have {PIXELS} bytes");
    assert_eq!(out.len(), PIXELS, "output must have {PIXELS} values");
    let pad = policy.crop_padding as isize;
    let (dy, dx) = if pad > 0 {
        (rng.gen_range(-pad..=pad), rng.gen_range(-pad..=pad))
    } else {
        (0, 0)
    };
    let flip = policy.flip_prob > 0.0 && rng.gen_bool(policy.flip_prob);
    let side = IMAGE_SIDE as isize;
    for c in 0..CHANNELS {
        let scale = 1.0 / (255.0 * policy.normalize_std[c]);
        let shift = policy.normalize_mean[c] / policy.normalize_std[c];
        let plane = &image[c * IMAGE_SIDE * IMAGE_SIDE..(c + 1) * IMAGE_SIDE * IMAGE_SIDE];
        for y in 0..side {
            for x in 0..side {
                let sx = if flip { side - 1 - x } else { x };
                let (iy, ix) = (y + dy, sx + dx);
                let raw = if (0..side).contains(&iy) && (0..side).contains(&ix) {
                    plane[(iy * side + ix) as usize] as f64
                } else {
                    0.0
                };
                out[c * IMAGE_SIDE * IMAGE_SIDE + (y * side + x) as usize] = T::from_f64_lossy(raw * scale - shift);
            }
        }
    }
}

pub fn augment<T: Real, R: Rng + ?Sized>(image: &[u8], policy: &AugmentPolicy, rng: &mut R) -> Tensor<T> {
    let mut out = vec![T::zero(); PIXELS];
    augment_into(image, policy, rng, &mut out);
    Tensor::new(vec![CHANNELS, IMAGE_SIDE, IMAGE_SIDE], out).expect("fixed shape")
}

/// Sample order for one epoch: a seeded permutation, or natural order.
pub fn epoch_order(n: usize, shuffle_seed: Option<u64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    idx
}

pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

/// Iterator over `[n, 3, 32, 32]` batches. The final partial batch is kept.
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    policy: AugmentPolicy,
    rng: Option<ChaCha8Rng>,
}

/// Batches of `ds` in the order given by `shuffle_seed`. With `augment_seed`
/// the full policy is applied; without it only normalization.
pub fn batches<'a>(
    ds: &'a Dataset,
    batch_size: usize,
    shuffle_seed: Option<u64>,
    policy: &AugmentPolicy,
    augment_seed: Option<u64>,
) -> Result<Batches<'a>> {
    if batch_size == 0 {
        return Err(arg_err("batches", "batch size must be at least 1"));
    }
    let (policy, rng) = match augment_seed {
        Some(s) => (policy.clone(), Some(ChaCha8Rng::seed_from_u64(s))),
        None => (policy.eval(), None),
    };
    Ok(Batches {
        ds,
        order: epoch_order(ds.len(), shuffle_seed),
        batch_size,
        pos: 0,
        policy,
        rng,
    })
}

impl Batches<'_> {
    pub fn next_batch<T: Real>(&mut self) -> Option<Batch<T>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let mut data = vec![T::zero(); idx.len() * PIXELS];
        let mut noop = ChaCha8Rng::seed_from_u64(0);
        for (k, &i) in idx.iter().enumerate() {
            let rng = self.rng.as_mut().unwrap_or(&mut noop);
            augment_into(self.ds.image(i), &self.policy, rng, &mut data[k * PIXELS..(k + 1) * PIXELS]);
        }
        Some(Batch {
            images: Tensor::new(vec![idx.len(), CHANNELS, IMAGE_SIDE, IMAGE_SIDE], data).expect("batch shape"),
            labels: idx.iter().map(|&i| self.ds.labels[i]).collect(),
        })
    }

    pub fn batch_sizes(&self) -> Vec<usize> {
        let n = self.order.len();
        (0..n).step_by(self.batch_size).map(|s| self.batch_size.min(n - s)).collect()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch<f32>;

    fn next(&mut self) -> Option<Batch<f32>> {
        self.next_batch()
    }
}

/// Class-conditional Gaussian blobs: each class has its own colour and a
/// bright spot at a class-specific position, plus per-sample noise.
/// Balanced, with labels cycling `0, 1, .., classes-1`.
pub fn synthetic_dataset(n: usize, num_classes: usize, seed: u64, split: Split) -> Result<Dataset> {
    if num_classes == 0 || n < num_classes {
        return Err(arg_err(
            "synthetic_dataset",
            format!("need n >= classes >= 1, got n={n}, classes={num_classes}"),
        ));
    }
    // Class prototypes do not depend on the split, so train and test sets
    // drawn with different seeds share the same classes.
    let mut proto_rng = ChaCha8Rng::seed_from_u64(0x5eed_c1a5);
    let protos: Vec<([f64; 3], f64, f64)> = (0..num_classes)
        .map(|_| {
            let colour = [0, 1, 2].map(|_| proto_rng.gen_range(100.0..156.0));
            let cy = proto_rng.gen_range(6.0..26.0);
            let cx = proto_rng.gen_range(6.0..26.0);
            (colour, cy, cx)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 48.0).expect("valid sigma");
    let jitter = Normal::new(0.0, 3.0).expect("valid sigma");
    let side = IMAGE_SIDE as f64;
    let mut images = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % num_classes;
        let (colour, cy, cx) = protos[label];
        let (cy, cx) = (cy + jitter.sample(&mut rng), cx + jitter.sample(&mut rng));
        for (c, &base) in colour.iter().enumerate() {
            for y in 0..IMAGE_SIDE {
                for x in 0..IMAGE_SIDE {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let spot = 50.0 * (-d2 / (2.0 * (side / 8.0).powi(2))).exp();
                    let v = 0.6 * base + spot * if c == label % 3 { 1.0 } else { 0.3 } + noise.sample(&mut rng);
                    images.push(v.clamp(0.0, 255.0).round() as u8);
                }
            }
        }
        labels.push(label);
    }
    Dataset::new("synthetic", split, num_classes, images, labels)
}
