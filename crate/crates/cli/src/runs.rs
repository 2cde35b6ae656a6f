//! Run directories: manifest, per-epoch records, best checkpoint, summary.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use serde::{Deserialize, Serialize};

use reviewkd::data::{load_cifar, synthetic_dataset, AugmentPolicy, Dataset, Split, Variant};
use reviewkd::models::ModelSpec;
use reviewkd::training::{
    load_checkpoint, DistillConfig, RunRecord, Schedule, Session, TrainConfig,
};
use reviewkd::Real;

use crate::{usage, DatasetKind, Preset, PrecisionArg, RecipeArgs};

pub const MANIFEST: &str = "manifest.json";
pub const RECORD_CSV: &str = "record.csv";
pub const RECORD_JSON: &str = "record.json";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const SUMMARY: &str = "summary.txt";

/// Seed of the class-balanced subset draw. Fixed so every seed of a grid
/// sees the same images.
pub const SUBSET_SEED: u64 = 0;
const SYNTHETIC_CLASSES: usize = 10;
const SYNTHETIC_TRAIN: usize = 512;
const SYNTHETIC_TEST: usize = 256;
const DESK_SUBSET: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub checkpoint: PathBuf,
    pub record_csv: PathBuf,
    pub record_json: PathBuf,
    pub summary: PathBuf,
}

impl Artifacts {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            checkpoint: dir.join(CHECKPOINT),
            record_csv: dir.join(RECORD_CSV),
            record_json: dir.join(RECORD_JSON),
            summary: dir.join(SUMMARY),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataInfo {
    pub dataset: String,
    pub data_dir: Option<PathBuf>,
    pub train_size: usize,
    pub test_size: usize,
    pub subset_seed: u64,
}

/// Written to the run directory before the first training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Grouping key used by `report`, e.g. the ablation mode or `lambda=0.7`.
    pub label: String,
    pub seed: u64,
    pub precision: String,
    pub data: DataInfo,
    pub config: serde_json::Value,
    pub out_dir: PathBuf,
    pub artifacts: Artifacts,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<RunManifest> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Train and test splits plus the matching augmentation policy.
pub struct Data {
    pub train: Dataset,
    pub test: Dataset,
    pub policy: AugmentPolicy,
    pub info: DataInfo,
}

impl Data {
    pub fn num_classes(&self) -> usize {
        self.train.num_classes
    }
}

fn dataset_kind(r: &RecipeArgs) -> DatasetKind {
    r.dataset.unwrap_or(match r.preset {
        Preset::Full => DatasetKind::Cifar100,
        Preset::Desk => DatasetKind::Cifar10,
    })
}

pub fn load_data(r: &RecipeArgs) -> Result<Data> {
    let kind = dataset_kind(r);
    let (train, test, policy) = match kind {
        DatasetKind::Synthetic => {
            let train_n = r.subset.unwrap_or(SYNTHETIC_TRAIN);
            let test_n = r.test_subset.unwrap_or(SYNTHETIC_TEST);
            if train_n < SYNTHETIC_CLASSES || test_n < SYNTHETIC_CLASSES {
                return Err(usage(format!(
                    "synthetic data needs at least {SYNTHETIC_CLASSES} training and test samples"
                )));
            }
            (
                synthetic_dataset(train_n, SYNTHETIC_CLASSES, 1, Split::Train)?,
                synthetic_dataset(test_n, SYNTHETIC_CLASSES, 2, Split::Test)?,
                AugmentPolicy::cifar10(),
            )
        }
        DatasetKind::Cifar10 | DatasetKind::Cifar100 => {
            let variant = if kind == DatasetKind::Cifar10 { Variant::Cifar10 } else { Variant::Cifar100 };
            let dir = r.data_dir.as_ref().ok_or_else(|| {
                usage(format!("{variant} needs --data-dir or REVIEWKD_DATA_DIR"))
            })?;
            let mut train = load_cifar(dir, variant, Split::Train)?;
            let mut test = load_cifar(dir, variant, Split::Test)?;
            let subset = r.subset.or(match r.preset {
                Preset::Desk => Some(DESK_SUBSET),
                Preset::Full => None,
            });
            if let Some(n) = subset {
                if n == 0 || n > train.len() {
                    return Err(usage(format!("--subset {n} outside 1..={}", train.len())));
                }
                train = train.subset(n, SUBSET_SEED)?;
            }
            if let Some(n) = r.test_subset {
                if n == 0 || n > test.len() {
                    return Err(usage(format!("--test-subset {n} outside 1..={}", test.len())));
                }
                test = test.subset(n, SUBSET_SEED)?;
            }
            (train, test, AugmentPolicy::for_variant(variant))
        }
    };
    let info = DataInfo {
        dataset: format!("{kind:?}").to_lowercase(),
        data_dir: r.data_dir.clone(),
        train_size: train.len(),
        test_size: test.len(),
        subset_seed: SUBSET_SEED,
    };
    Ok(Data { train, test, policy, info })
}

/// The preset recipe with command-line overrides applied.
pub fn train_config(r: &RecipeArgs, seed: u64) -> Result<TrainConfig> {
    let mut cfg = match r.preset {
        Preset::Full => TrainConfig::full(seed),
        Preset::Desk => TrainConfig::desk(seed),
    };
    if let Some(e) = r.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = r.batch_size {
        cfg.batch_size = b;
    }
    let schedule = Schedule::new(
        r.lr.unwrap_or(cfg.schedule.base_lr),
        r.decay_epochs.clone().unwrap_or_else(|| cfg.schedule.decay_epochs.clone()),
        r.decay_factor.unwrap_or(cfg.schedule.decay_factor),
    )
    .map_err(|e| usage(e.to_string()))?;
    cfg.schedule = schedule;
    if let Some(m) = r.momentum {
        cfg.momentum = m;
    }
    if let Some(wd) = r.weight_decay {
        cfg.weight_decay = wd;
    }
    cfg.nesterov = !r.no_nesterov;
    cfg.augment = !r.no_augment;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

pub fn parse_arch(s: &str) -> Result<ModelSpec> {
    s.parse().map_err(|e: reviewkd::Error| usage(e.to_string()))
}

/// Parse an architecture name and give it the dataset's class count. An
/// explicit `:N` suffix must agree with the dataset.
pub fn model_spec(s: &str, num_classes: usize) -> Result<ModelSpec> {
    let spec = parse_arch(s)?;
    if s.contains(':') && spec.num_classes != num_classes {
        return Err(usage(format!(
            "model {s} has {} classes but the dataset has {num_classes}",
            spec.num_classes
        )));
    }
    Ok(spec.with_classes(num_classes))
}

pub enum RunKind {
    Plain { spec: ModelSpec, train: TrainConfig },
    Distill(Box<DistillConfig>),
}

impl RunKind {
    fn epochs(&self) -> usize {
        match self {
            RunKind::Plain { train, .. } => train.epochs,
            RunKind::Distill(cfg) => cfg.train.epochs,
        }
    }

    fn seed(&self) -> u64 {
        match self {
            RunKind::Plain { train, .. } => train.seed,
            RunKind::Distill(cfg) => cfg.train.seed,
        }
    }

    fn config_json(&self) -> Result<serde_json::Value> {
        Ok(match self {
            RunKind::Plain { spec, train } => serde_json::json!({ "model": spec, "train": train }),
            RunKind::Distill(cfg) => serde_json::to_value(cfg)?,
        })
    }
}

pub struct RunPlan {
    pub command: String,
    pub label: String,
    pub dir: PathBuf,
    pub kind: RunKind,
    pub precision: PrecisionArg,
    pub resume: bool,
}

/// What a finished (or previously finished) run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub label: String,
    pub seed: u64,
    pub final_test_acc: f64,
    pub best_epoch: usize,
    pub best_test_acc: f64,
    pub skipped: bool,
}

impl RunOutcome {
    fn from_record(dir: &Path, label: &str, record: &RunRecord, skipped: bool) -> Result<Self> {
        let (best_epoch, best_test_acc) = record.best_test().context("run has no epochs")?;
        Ok(Self {
            dir: dir.to_path_buf(),
            label: label.to_string(),
            seed: record.seed,
            final_test_acc: record.final_test_acc().context("run has no epochs")?,
            best_epoch,
            best_test_acc,
            skipped,
        })
    }
}

/// Check the run directory, returning a finished record when `--resume`
/// allows the run to be skipped.
fn prepare_dir(plan: &RunPlan) -> Result<Option<RunRecord>> {
    let arts = Artifacts::in_dir(&plan.dir);
    if plan.dir.join(MANIFEST).exists() {
        if !plan.resume {
            return Err(usage(format!(
                "{} already holds a run; pass --resume or choose another --out",
                plan.dir.display()
            )));
        }
        let previous = RunManifest::read(&plan.dir)?;
        if previous.config != plan.kind.config_json()? {
            return Err(usage(format!(
                "{} holds a run with a different configuration; choose another --out",
                plan.dir.display()
            )));
        }
        if arts.checkpoint.is_file() && arts.record_json.is_file() {
            let record = RunRecord::read_json(&arts.record_json)?;
            if record.rows().len() == plan.kind.epochs() && record.seed == plan.kind.seed() {
                return Ok(Some(record));
            }
        }
        info!("{}: unfinished run, starting over", plan.dir.display());
    }
    fs::create_dir_all(&plan.dir).with_context(|| format!("creating {}", plan.dir.display()))?;
    Ok(None)
}

pub fn execute(plan: &RunPlan, data: &Data) -> Result<RunOutcome> {
    match plan.precision {
        PrecisionArg::F32 => execute_typed::<f32>(plan, data),
        PrecisionArg::F64 => execute_typed::<f64>(plan, data),
    }
}

fn execute_typed<T: Real>(plan: &RunPlan, data: &Data) -> Result<RunOutcome> {
    if let Some(record) = prepare_dir(plan)? {
        info!("{}: already finished, skipping", plan.dir.display());
        return RunOutcome::from_record(&plan.dir, &plan.label, &record, true);
    }
    let arts = Artifacts::in_dir(&plan.dir);
    let manifest = RunManifest {
        command: plan.command.clone(),
        label: plan.label.clone(),
        seed: plan.kind.seed(),
        precision: format!("{:?}", plan.precision).to_lowercase(),
        data: data.info.clone(),
        config: plan.kind.config_json()?,
        out_dir: plan.dir.clone(),
        artifacts: arts.clone(),
    };
    fs::write(plan.dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    for stale in [&arts.checkpoint, &arts.record_csv, &arts.record_json, &arts.summary] {
        if stale.exists() {
            fs::remove_file(stale)?;
        }
    }

    let mut session = match &plan.kind {
        RunKind::Plain { spec, train } => Session::<T>::plain(spec.clone(), train.clone(), data.policy.clone())?,
        RunKind::Distill(cfg) => {
            let path = cfg.teacher_checkpoint.as_ref().context("distillation needs a teacher checkpoint")?;
            let teacher = load_checkpoint::<T>(path, None)?.model;
            if teacher.spec().num_classes != data.num_classes() {
                bail!(
                    "teacher {} predicts {} classes but the dataset has {}",
                    path.display(),
                    teacher.spec().num_classes,
                    data.num_classes()
                );
            }
            Session::distill((**cfg).clone(), teacher, data.policy.clone())?
        }
    };

    info!("{}: {} epochs, label {}", plan.dir.display(), plan.kind.epochs(), plan.label);
    let mut best: Option<f64> = None;
    while !session.is_finished() {
        let acc = session.run_epoch(&data.train, &data.test)?.test_acc;
        session.record().write_csv(&arts.record_csv)?;
        session.record().write_json(&arts.record_json)?;
        if best.map_or(true, |b| acc > b) {
            best = Some(acc);
            session.save(&arts.checkpoint)?;
        }
    }
    let outcome = RunOutcome::from_record(&plan.dir, &plan.label, session.record(), false)?;
    let last = session.record().rows().last().expect("finished run has rows");
    let summary = format!(
        "command: {}\nlabel: {}\nseed: {}\nepochs: {}\nfinal test acc: {:.4}\nbest test acc: {:.4} (epoch {})\nfinal train loss: {:.6}\nwall time: {:.1} s\n",
        plan.command,
        plan.label,
        outcome.seed,
        session.record().rows().len(),
        outcome.final_test_acc,
        outcome.best_test_acc,
        outcome.best_epoch,
        last.train_loss,
        last.wall_time,
    );
    fs::write(&arts.summary, summary)?;
    info!(
        "{}: final {:.4}, best {:.4} at epoch {}",
        plan.dir.display(),
        outcome.final_test_acc,
        outcome.best_test_acc,
        outcome.best_epoch
    );
    Ok(outcome)
}
