use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::{error, info};

use reviewkd::models::ModelSpec;
use reviewkd::oracles::{gradcheck_suite, GRAD_PASS_FRACTION, GRAD_TOL};
use reviewkd::review::{AblationMode, HclSpec};
use reviewkd::training::{default_mid_channels, load_checkpoint, DistillConfig};

use crate::report::{mean_std, write_csv_rows};
use crate::runs::{execute, load_data, model_spec, parse_arch, train_config, Data, RunKind, RunOutcome, RunPlan};
use crate::{
    usage, AblateArgs, Command, DistillArgs, GradcheckArgs, ReviewArgs, SweepArgs, TrainTeacherArgs,
};

pub fn execute_command(cmd: &Command) -> Result<()> {
    match cmd {
        Command::TrainTeacher(a) => train_teacher(a).map(|_| ()),
        Command::Distill(a) => distill(a).map(|_| ()),
        Command::Ablate(a) => ablate(a),
        Command::SweepLambda(a) => sweep_lambda(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Report(a) => crate::report::run(a),
    }
}

pub fn train_teacher(a: &TrainTeacherArgs) -> Result<RunOutcome> {
    // Validate the cheap things before touching the data.
    parse_arch(&a.model)?;
    let train = train_config(&a.recipe, a.seed)?;
    let data = load_data(&a.recipe)?;
    let spec = model_spec(&a.model, data.num_classes())?;
    let dir = a.recipe.out.clone().unwrap_or_else(|| {
        PathBuf::from("runs").join(format!("teacher-{}-{}-s{}", spec.name(), data.info.dataset, a.seed))
    });
    execute(
        &RunPlan {
            command: "train-teacher".into(),
            label: spec.name(),
            dir,
            kind: RunKind::Plain { spec, train },
            precision: a.recipe.precision,
            resume: a.recipe.resume,
        },
        &data,
    )
}

/// Everything a distillation run needs except mode, λ and seed.
struct DistillBase {
    teacher: ModelSpec,
    teacher_path: PathBuf,
    student: ModelSpec,
    data: Data,
    hcl: Option<HclSpec>,
}

fn distill_base(r: &ReviewArgs) -> Result<DistillBase> {
    parse_arch(&r.student)?;
    train_config(&r.recipe, 0)?;
    let hcl = match (&r.hcl_levels, &r.hcl_weights) {
        (None, None) => r.hcl_unnormalized.then(|| HclSpec::pyramid().with_normalize(false)),
        (Some(l), Some(w)) => Some(HclSpec::parse(l, w, !r.hcl_unnormalized).map_err(|e| usage(e.to_string()))?),
        _ => return Err(usage("--hcl-levels and --hcl-weights must be given together")),
    };
    if r.mid_channels == Some(0) {
        return Err(usage("--mid-channels must be positive"));
    }
    if !r.teacher.is_file() {
        return Err(usage(format!("teacher checkpoint {} does not exist", r.teacher.display())));
    }
    let teacher = load_checkpoint::<f32>(&r.teacher, None)
        .with_context(|| format!("loading teacher {}", r.teacher.display()))?
        .model
        .spec()
        .clone();
    let data = load_data(&r.recipe)?;
    let student = model_spec(&r.student, data.num_classes())?;
    Ok(DistillBase {
        teacher,
        teacher_path: r.teacher.clone(),
        student,
        data,
        hcl,
    })
}

fn distill_config(
    base: &DistillBase,
    r: &ReviewArgs,
    mode: AblationMode,
    lambda: Option<f64>,
    seed: u64,
) -> Result<DistillConfig> {
    let mut cfg = DistillConfig::new(base.teacher.clone(), base.student.clone(), train_config(&r.recipe, seed)?);
    cfg.teacher_checkpoint = Some(base.teacher_path.clone());
    cfg.mode = mode;
    if let Some(l) = lambda {
        cfg.lambda = l;
    }
    if let Some(h) = &base.hcl {
        cfg.hcl = h.clone();
    }
    cfg.mid_channels = r.mid_channels.unwrap_or_else(|| default_mid_channels(&base.teacher));
    if r.no_warmup || r.warmup_epochs == Some(0) {
        cfg.warmup_epochs = None;
    } else if let Some(w) = r.warmup_epochs {
        cfg.warmup_epochs = Some(w);
    }
    cfg.include_ce = !r.no_ce;
    cfg.validate().map_err(|e| match e {
        // Class-count disagreement comes from the teacher file, not the flags.
        reviewkd::Error::InvalidArgument { detail, .. } if detail.contains("classes") => anyhow::anyhow!(detail),
        e => usage(e.to_string()),
    })?;
    Ok(cfg)
}

fn fmt_lambda(l: f64) -> String {
    format!("{l}")
}

pub fn distill(a: &DistillArgs) -> Result<RunOutcome> {
    if let Some(l) = a.lambda {
        check_lambda(l)?;
    }
    let base = distill_base(&a.review)?;
    let cfg = distill_config(&base, &a.review, a.mode, a.lambda, a.seed)?;
    let dir = a.review.recipe.out.clone().unwrap_or_else(|| {
        PathBuf::from("runs").join(format!(
            "distill-{}-{}-{}-l{}-s{}",
            base.teacher.name(),
            base.student.name(),
            a.mode,
            fmt_lambda(cfg.lambda),
            a.seed
        ))
    });
    execute(
        &RunPlan {
            command: "distill".into(),
            label: a.mode.to_string(),
            dir,
            kind: RunKind::Distill(Box::new(cfg)),
            precision: a.review.recipe.precision,
            resume: a.review.recipe.resume,
        },
        &base.data,
    )
}

fn check_lambda(l: f64) -> Result<()> {
    if !(l.is_finite() && l >= 0.0) {
        return Err(usage(format!("lambda {l} must be a finite number >= 0")));
    }
    Ok(())
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(usage("no seeds given"));
    }
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != seeds.len() {
        return Err(usage("duplicate seeds"));
    }
    Ok(())
}

fn grid_dir(r: &ReviewArgs, default: String) -> PathBuf {
    r.recipe.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(default))
}

/// Run every plan, logging failures instead of stopping.
fn run_grid(plans: Vec<RunPlan>, data: &Data) -> (Vec<RunOutcome>, Vec<(RunPlan, anyhow::Error)>) {
    let mut done = Vec::new();
    let mut failed = Vec::new();
    let total = plans.len();
    for (i, plan) in plans.into_iter().enumerate() {
        info!("sub-run {}/{total}: {}", i + 1, plan.dir.display());
        match execute(&plan, data) {
            Ok(o) => done.push(o),
            Err(e) => {
                error!("{} failed: {e:#}", plan.dir.display());
                failed.push((plan, e));
            }
        }
    }
    (done, failed)
}

fn finish_grid(failed: &[(RunPlan, anyhow::Error)], summary_path: &Path, table: &str) -> Result<()> {
    let mut text = table.to_string();
    if !failed.is_empty() {
        text.push_str("\nfailed sub-runs:\n");
        for (plan, e) in failed {
            text.push_str(&format!("  {}: {e:#}\n", plan.dir.display()));
        }
    }
    fs::write(summary_path, &text)?;
    print!("{text}");
    if failed.is_empty() {
        Ok(())
    } else {
        anyhow::bail!("{} of the grid's sub-runs failed", failed.len())
    }
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    if let Some(l) = a.lambda {
        check_lambda(l)?;
    }
    check_seeds(&a.seeds)?;
    let modes = a.modes.clone().unwrap_or_else(|| AblationMode::ALL.to_vec());
    if modes.is_empty() {
        return Err(usage("no modes given"));
    }
    let base = distill_base(&a.review)?;
    let root = grid_dir(&a.review, format!("ablate-{}-{}", base.teacher.name(), base.student.name()));
    let mut plans = Vec::new();
    for &mode in &modes {
        for &seed in &a.seeds {
            let cfg = distill_config(&base, &a.review, mode, a.lambda, seed)?;
            plans.push(RunPlan {
                command: "ablate".into(),
                label: mode.to_string(),
                dir: root.join(format!("{mode}-s{seed}")),
                kind: RunKind::Distill(Box::new(cfg)),
                precision: a.review.recipe.precision,
                resume: a.review.recipe.resume,
            });
        }
    }
    fs::create_dir_all(&root)?;
    let (done, failed) = run_grid(plans, &base.data);

    let mut header = vec!["mode".to_string(), "review".into(), "rlf".into(), "abf".into(), "hcl".into()];
    header.extend(a.seeds.iter().map(|s| format!("seed_{s}")));
    header.extend(["mean".to_string(), "std".into(), "n".into()]);
    let mut rows = vec![header];
    let mut table = format!("{:<12} {:>6} {:>4} {:>4} {:>4}  {:>16}  n\n", "mode", "review", "rlf", "abf", "hcl", "final test acc");
    for &mode in &modes {
        let accs: Vec<Option<f64>> = a
            .seeds
            .iter()
            .map(|&s| done.iter().find(|o| o.label == mode.to_string() && o.seed == s).map(|o| o.final_test_acc))
            .collect();
        let present: Vec<f64> = accs.iter().flatten().copied().collect();
        let (mean, std) = mean_std(&present);
        let flags = mode.components().map(|c| if c { "x" } else { "" }.to_string());
        let mut row = vec![mode.to_string()];
        row.extend(flags.iter().cloned());
        row.extend(accs.iter().map(|a| a.map_or("failed".to_string(), |v| format!("{v:.4}"))));
        row.extend([fmt_opt(mean), fmt_opt(std), present.len().to_string()]);
        rows.push(row);
        table.push_str(&format!(
            "{:<12} {:>6} {:>4} {:>4} {:>4}  {:>16}  {}\n",
            mode.to_string(),
            flags[0],
            flags[1],
            flags[2],
            flags[3],
            fmt_mean_std(mean, std),
            present.len()
        ));
    }
    write_csv_rows(&root.join("ablation.csv"), &rows)?;
    finish_grid(&failed, &root.join("summary.txt"), &table)
}

fn parse_lambdas(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(',').map(str::trim).filter(|p| !p.is_empty()).collect();
    if parts.is_empty() {
        return Err(usage("--lambdas is empty; give at least one value"));
    }
    parts
        .iter()
        .map(|p| {
            let l: f64 = p.parse().map_err(|_| usage(format!("lambda `{p}` is not a number")))?;
            check_lambda(l)?;
            Ok(l)
        })
        .collect()
}

pub fn sweep_lambda(a: &SweepArgs) -> Result<()> {
    let lambdas = parse_lambdas(&a.lambdas)?;
    check_seeds(&a.seeds)?;
    if a.review.no_ce && lambdas.contains(&0.0) {
        return Err(usage("lambda 0 with --no-ce leaves no loss"));
    }
    let base = distill_base(&a.review)?;
    let root = grid_dir(&a.review, format!("sweep-{}-{}", base.teacher.name(), base.student.name()));
    let mut plans = Vec::new();
    for &l in &lambdas {
        for &seed in &a.seeds {
            let cfg = distill_config(&base, &a.review, a.mode, Some(l), seed)?;
            plans.push(RunPlan {
                command: "sweep-lambda".into(),
                label: format!("lambda={}", fmt_lambda(l)),
                dir: root.join(format!("lambda{}-s{seed}", fmt_lambda(l))),
                kind: RunKind::Distill(Box::new(cfg)),
                precision: a.review.recipe.precision,
                resume: a.review.recipe.resume,
            });
        }
    }
    fs::create_dir_all(&root)?;
    let (done, failed) = run_grid(plans, &base.data);

    let mut rows = vec![vec!["lambda".to_string(), "seed".into(), "test_acc".into(), "best_test_acc".into()]];
    let mut table = format!("{:>8}  {:>16}  n\n", "lambda", "final test acc");
    for &l in &lambdas {
        let label = format!("lambda={}", fmt_lambda(l));
        let mut accs = Vec::new();
        for &seed in &a.seeds {
            if let Some(o) = done.iter().find(|o| o.label == label && o.seed == seed) {
                rows.push(vec![fmt_lambda(l), seed.to_string(), format!("{:.6}", o.final_test_acc), format!("{:.6}", o.best_test_acc)]);
                accs.push(o.final_test_acc);
            }
        }
        let (mean, std) = mean_std(&accs);
        table.push_str(&format!("{:>8}  {:>16}  {}\n", fmt_lambda(l), fmt_mean_std(mean, std), accs.len()));
    }
    write_csv_rows(&root.join("sweep.csv"), &rows)?;
    finish_grid(&failed, &root.join("summary.txt"), &table)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:.4}"))
}

pub fn fmt_mean_std(mean: Option<f64>, std: Option<f64>) -> String {
    match (mean, std) {
        (Some(m), Some(s)) => format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s),
        _ => "n/a".to_string(),
    }
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let checks = gradcheck_suite(a.seed)?;
    let mut offenders = Vec::new();
    println!("{:<28} {:>10} {:>10} {:>8} {:>7}", "operator", "max rel", "mean rel", "pass", "coords");
    for c in &checks {
        let s = c.summary()?;
        let ok = c.passes();
        println!(
            "{:<28} {:>10.2e} {:>10.2e} {:>8.4} {:>7} {}",
            c.name,
            s.max_rel_err,
            s.mean_rel_err,
            s.pass_fraction(GRAD_TOL),
            s.samples,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            offenders.push(c.name.clone());
        }
    }
    if offenders.is_empty() {
        println!(
            "all {} checks pass: relative error < {GRAD_TOL:e} on >= {:.0}% of coordinates",
            checks.len(),
            100.0 * GRAD_PASS_FRACTION
        );
        Ok(())
    } else {
        anyhow::bail!("gradient check failed for: {}", offenders.join(", "))
    }
}
