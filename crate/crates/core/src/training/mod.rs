//! Optimizer, schedule, training loops, evaluation and checkpoints.

pub mod checkpoint;
pub mod record;
pub mod sgd;

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{batches, AugmentPolicy, Dataset};
use crate::error::{arg_err, Error, Result};
use crate::models::{Family, Model, ModelSpec, Module};
use crate::review::{review_loss, total_loss_var, warmup_factor, AblationMode, HclSpec, ReviewUnits};
use crate::tensor::kernels::Mode;
use crate::tensor::{Real, Tape, Tensor};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ReviewMeta};
pub use record::{EpochRow, RunRecord};
pub use sgd::{lr_at, Schedule, SgdState};

/// Optimisation recipe shared by teachers and students.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub seed: u64,
    /// Random crops and flips on the training split.
    pub augment: bool,
}

impl TrainConfig {
    /// 240 epochs, batch 128, lr 0.1 decayed 10x at 150/180/210.
    pub fn full(seed: u64) -> Self {
        Self {
            epochs: 240,
            batch_size: 128,
            schedule: Schedule::new(0.1, vec![150, 180, 210], 0.1).expect("valid schedule"),
            momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
            seed,
            augment: true,
        }
    }

    /// The full recipe compressed to 40 epochs with proportional anchors.
    pub fn desk(seed: u64) -> Self {
        Self {
            epochs: 40,
            schedule: Schedule::new(0.1, vec![25, 32, 37], 0.1).expect("valid schedule"),
            ..Self::full(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(arg_err("train config", "epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(arg_err("train config", "batch size must be at least 1"));
        }
        Schedule::new(
            self.schedule.base_lr,
            self.schedule.decay_epochs.clone(),
            self.schedule.decay_factor,
        )?;
        SgdState::<f64>::new(self.momentum, self.nesterov, self.weight_decay)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub teacher: ModelSpec,
    pub teacher_checkpoint: Option<PathBuf>,
    pub student: ModelSpec,
    pub lambda: f64,
    pub mode: AblationMode,
    pub hcl: HclSpec,
    pub mid_channels: usize,
    /// Length of the linear λ ramp; `None` disables it.
    pub warmup_epochs: Option<usize>,
    /// `false` trains on the distillation term alone.
    pub include_ce: bool,
    pub train: TrainConfig,
}

impl DistillConfig {
    /// Defaults for a teacher/student pair: the pair's λ, full mode, pyramid
    /// HCL and a 20-epoch ramp scaled to the recipe length.
    pub fn new(teacher: ModelSpec, student: ModelSpec, train: TrainConfig) -> Self {
        let warmup = ((20 * train.epochs) as f64 / 240.0).round() as usize;
        Self {
            lambda: default_lambda(&teacher, &student),
            mid_channels: default_mid_channels(&teacher),
            teacher,
            teacher_checkpoint: None,
            student,
            mode: AblationMode::Full,
            hcl: HclSpec::pyramid(),
            warmup_epochs: Some(warmup.max(1)),
            include_ce: true,
            train,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(arg_err("distill config", format!("lambda {} must be >= 0", self.lambda)));
        }
        if !self.include_ce && self.lambda == 0.0 {
            return Err(arg_err("distill config", "no loss left with lambda 0 and cross-entropy disabled"));
        }
        if self.mid_channels == 0 {
            return Err(arg_err("distill config", "mid channels must be positive"));
        }
        if self.teacher.num_classes != self.student.num_classes {
            return Err(arg_err(
                "distill config",
                format!("teacher has {} classes, student {}", self.teacher.num_classes, self.student.num_classes),
            ));
        }
        Ok(())
    }

    fn review_meta(&self) -> ReviewMeta {
        ReviewMeta {
            mode: self.mode,
            teacher: self.teacher.clone(),
            mid_channels: self.mid_channels,
        }
    }
}

/// Loss weight used for a known teacher/student pair, 1.0 otherwise.
pub fn default_lambda(teacher: &ModelSpec, student: &ModelSpec) -> f64 {
    match (teacher.name().as_str(), student.name().as_str()) {
        ("resnet56", "resnet20") => 0.7,
        ("resnet110", "resnet32") => 1.0,
        ("resnet32x4", "resnet8x4") => 5.0,
        ("wrn40-2", "wrn16-2") => 5.0,
        ("wrn40-2", "wrn40-1") => 5.0,
        _ => 1.0,
    }
}

/// 64 for width-1 ResNet teachers, 256 for wide ones.
pub fn default_mid_channels(teacher: &ModelSpec) -> usize {
    if teacher.family == Family::Resnet && teacher.width_factor == 1 {
        64
    } else {
        256
    }
}

/// Independent RNG seed for one use (`stream`) within one epoch.
pub fn derive_seed(seed: u64, stream: u64, epoch: usize) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (epoch as u64).wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const STREAM_REVIEW_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_AUGMENT: u64 = 3;

/// Anything that maps a normalized image batch to logits.
pub trait Classifier<T: Real> {
    fn logits(&mut self, images: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Real> Classifier<T> for Model<T> {
    fn logits(&mut self, images: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_values(images, Mode::Eval)?.logits)
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax_first<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &l)| argmax_first(row) == l)
        .count()
}

/// Top-1 accuracy with normalization only.
pub fn evaluate<T: Real, C: Classifier<T>>(
    model: &mut C,
    ds: &Dataset,
    batch_size: usize,
    policy: &AugmentPolicy,
) -> Result<f64> {
    let mut it = batches(ds, batch_size, None, policy, None)?;
    let mut correct = 0;
    while let Some(b) = it.next_batch::<T>() {
        let logits = model.logits(&b.images)?;
        correct += count_correct(&logits, &b.labels);
    }
    Ok(correct as f64 / ds.len() as f64)
}

struct Review<T> {
    teacher: Model<T>,
    teacher_checksum: u64,
    units: ReviewUnits<T>,
    cfg: DistillConfig,
}

/// Owns the model, optimizer and record of one training run and advances
/// it one epoch at a time.
pub struct Session<T> {
    student: Model<T>,
    review: Option<Review<T>>,
    train: TrainConfig,
    sgd: SgdState<T>,
    policy: AugmentPolicy,
    record: RunRecord,
    started: Instant,
    next_epoch: usize,
}

impl<T: Real> Session<T> {
    /// Plain cross-entropy training of a freshly initialised `spec`.
    pub fn plain(spec: ModelSpec, train: TrainConfig, policy: AugmentPolicy) -> Result<Self> {
        train.validate()?;
        let config = serde_json::json!({ "kind": "train", "model": spec, "train": train, "augment": policy });
        let student = Model::build(spec, train.seed)?;
        Self::assemble(student, None, train, policy, config)
    }

    /// Distillation from `teacher`, whose parameters stay frozen.
    pub fn distill(cfg: DistillConfig, mut teacher: Model<T>, policy: AugmentPolicy) -> Result<Self> {
        cfg.validate()?;
        if *teacher.spec() != cfg.teacher {
            return Err(arg_err(
                "distill",
                format!("config names teacher {}, got {}", cfg.teacher, teacher.spec()),
            ));
        }
        let student = Model::build(cfg.student.clone(), cfg.train.seed)?;
        let (s_ch, t_ch) = (student.stage_channels(), teacher.stage_channels());
        if s_ch.len() != t_ch.len() {
            return Err(arg_err(
                "distill",
                format!("student has {} review stages, teacher {}", s_ch.len(), t_ch.len()),
            ));
        }
        teacher.set_requires_grad(false);
        let units = ReviewUnits::build(
            cfg.mode,
            &s_ch,
            &t_ch,
            cfg.mid_channels,
            derive_seed(cfg.train.seed, STREAM_REVIEW_INIT, 0),
        )?;
        let config = serde_json::json!({ "kind": "distill", "distill": cfg, "augment": policy });
        let train = cfg.train.clone();
        let teacher_checksum = teacher.checksum();
        Self::assemble(
            student,
            Some(Review {
                teacher,
                teacher_checksum,
                units,
                cfg,
            }),
            train,
            policy,
            config,
        )
    }

    fn assemble(
        student: Model<T>,
        review: Option<Review<T>>,
        train: TrainConfig,
        policy: AugmentPolicy,
        config: serde_json::Value,
    ) -> Result<Self> {
        Ok(Self {
            sgd: SgdState::new(train.momentum, train.nesterov, train.weight_decay)?,
            record: RunRecord::new(train.seed, config),
            student,
            review,
            train,
            policy,
            started: Instant::now(),
            next_epoch: 0,
        })
    }

    pub fn student(&mut self) -> &mut Model<T> {
        &mut self.student
    }

    pub fn teacher(&mut self) -> Option<&mut Model<T>> {
        self.review.as_mut().map(|r| &mut r.teacher)
    }

    pub fn units(&self) -> Option<&ReviewUnits<T>> {
        self.review.as_ref().map(|r| &r.units)
    }

    pub fn record(&self) -> &RunRecord {
        &self.record
    }

    pub fn epochs_done(&self) -> usize {
        self.next_epoch
    }

    pub fn is_finished(&self) -> bool {
        self.next_epoch >= self.train.epochs
    }

    fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        let classes = self.student.spec().num_classes;
        if ds.num_classes != classes {
            return Err(arg_err(
                "training",
                format!("dataset {} has {} classes, model has {classes}", ds.name, ds.num_classes),
            ));
        }
        Ok(())
    }

    /// Train one epoch, evaluate on `test` and append a record row.
    pub fn run_epoch(&mut self, train_ds: &Dataset, test_ds: &Dataset) -> Result<&EpochRow> {
        self.check_dataset(train_ds)?;
        self.check_dataset(test_ds)?;
        let epoch = self.next_epoch;
        let lr = self.train.schedule.lr(epoch);
        let seed = self.train.seed;
        let augment_seed = self.train.augment.then(|| derive_seed(seed, STREAM_AUGMENT, epoch));
        let mut it = batches(
            train_ds,
            self.train.batch_size,
            Some(derive_seed(seed, STREAM_SHUFFLE, epoch)),
            &self.policy,
            augment_seed,
        )?;
        let (mut total, mut ce_sum, mut kd_sum, mut correct) = (0.0, 0.0, 0.0, 0usize);
        let last_good = self.record.rows().last().map(|r| r.epoch);
        while let Some(batch) = it.next_batch::<T>() {
            let n = batch.labels.len();
            let (loss, ce, kd, hits) = self.step(&batch.images, &batch.labels, epoch, lr)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss, last_good });
            }
            total += loss * n as f64;
            ce_sum += ce * n as f64;
            kd_sum += kd * n as f64;
            correct += hits;
        }
        if let Some(r) = &mut self.review {
            if r.teacher.checksum() != r.teacher_checksum {
                return Err(Error::TeacherModified { epoch });
            }
        }
        let test_acc = evaluate(&mut self.student, test_ds, self.train.batch_size.max(1), &self.policy)?;
        let n = train_ds.len() as f64;
        let row = EpochRow {
            epoch,
            lr,
            train_loss: total / n,
            ce_loss: ce_sum / n,
            mkdr_loss: kd_sum / n,
            train_acc: correct as f64 / n,
            test_acc,
            wall_time: self.started.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}: lr {lr:.4} loss {:.4} (ce {:.4}, mkdr {:.4}) train {:.4} test {:.4}",
            row.train_loss, row.ce_loss, row.mkdr_loss, row.train_acc, row.test_acc
        );
        self.record.push(row)?;
        self.next_epoch += 1;
        Ok(self.record.rows().last().expect("row just pushed"))
    }

    /// One optimisation step; returns (total, ce, mkdr, correct).
    fn step(&mut self, images: &Tensor<T>, labels: &[usize], epoch: usize, lr: f64) -> Result<(f64, f64, f64, usize)> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let fs = self.student.forward_with_features(&mut tape, x, Mode::Train)?;
        let hits = count_correct(tape.value(fs.logits), labels);
        let ce = tape.softmax_cross_entropy(fs.logits, labels)?;
        let ce_value = tape.value(ce).item().as_f64();
        let (loss, kd_value) = match &mut self.review {
            Some(r) if r.cfg.lambda > 0.0 => {
                let t = r.teacher.forward_values(images, Mode::Eval)?;
                let t_stages: Vec<_> = t.stages.into_iter().map(|s| tape.constant(s)).collect();
                let out = review_loss(&mut tape, &fs.stages, &t_stages, &r.units, &r.cfg.hcl, r.cfg.mode)?;
                let kd_value = tape.value(out.loss).item().as_f64();
                let w = warmup_factor(epoch, r.cfg.warmup_epochs);
                let ce_term = r.cfg.include_ce.then_some(ce);
                (total_loss_var(&mut tape, ce_term, Some(out.loss), r.cfg.lambda, w)?, kd_value)
            }
            _ => (ce, 0.0),
        };
        let loss_value = tape.value(loss).item().as_f64();
        if !loss_value.is_finite() {
            return Ok((loss_value, ce_value, kd_value, hits));
        }
        let grads = tape.backward(loss)?;
        grads.apply_to(self.student.params_mut())?;
        if let Some(r) = &mut self.review {
            grads.apply_to(r.units.params_mut())?;
        }
        let mut params = self.student.params_mut();
        if let Some(r) = &mut self.review {
            params.extend(r.units.params_mut());
        }
        self.sgd.step(params, lr)?;
        Ok((loss_value, ce_value, kd_value, hits))
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        let seed = self.train.seed;
        match &mut self.review {
            Some(r) => {
                let meta = r.cfg.review_meta();
                save_checkpoint(path, &mut self.student, seed, Some((&mut r.units, &meta)))
            }
            None => save_checkpoint(path, &mut self.student, seed, None),
        }
    }

    /// Run the remaining epochs. With `best_checkpoint` the model is saved
    /// there whenever test accuracy improves.
    pub fn run(&mut self, train_ds: &Dataset, test_ds: &Dataset, best_checkpoint: Option<&Path>) -> Result<()> {
        let mut best = self.record.best_test().map(|(_, a)| a);
        while !self.is_finished() {
            let acc = self.run_epoch(train_ds, test_ds)?.test_acc;
            if best.map_or(true, |b| acc > b) {
                best = Some(acc);
                if let Some(path) = best_checkpoint {
                    self.save(path)?;
                }
            }
        }
        Ok(())
    }

    pub fn into_parts(self) -> (Model<T>, Option<(ReviewUnits<T>, Model<T>)>, RunRecord) {
        let review = self.review.map(|r| (r.units, r.teacher));
        (self.student, review, self.record)
    }
}

pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub record: RunRecord,
}

pub struct DistillOutcome<T> {
    pub student: Model<T>,
    pub units: ReviewUnits<T>,
    pub teacher: Model<T>,
    pub record: RunRecord,
}

/// Cross-entropy training, keeping the best checkpoint at `checkpoint`.
pub fn train_teacher<T: Real>(
    spec: ModelSpec,
    train: TrainConfig,
    policy: AugmentPolicy,
    train_ds: &Dataset,
    test_ds: &Dataset,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    let mut s = Session::plain(spec, train, policy)?;
    s.run(train_ds, test_ds, checkpoint)?;
    let (model, _, record) = s.into_parts();
    Ok(TrainOutcome { model, record })
}

pub fn distill<T: Real>(
    cfg: DistillConfig,
    teacher: Model<T>,
    policy: AugmentPolicy,
    train_ds: &Dataset,
    test_ds: &Dataset,
    checkpoint: Option<&Path>,
) -> Result<DistillOutcome<T>> {
    let mut s = Session::distill(cfg, teacher, policy)?;
    s.run(train_ds, test_ds, checkpoint)?;
    let (student, review, record) = s.into_parts();
    let (units, teacher) = review.expect("distill session has review units");
    Ok(DistillOutcome {
        student,
        units,
        teacher,
        record,
    })
}
