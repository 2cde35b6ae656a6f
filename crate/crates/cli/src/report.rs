//! Aggregation of finished runs into grouped mean ± std tables.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use walkdir::WalkDir;

use reviewkd::review::AblationMode;
use reviewkd::training::RunRecord;

use crate::commands::fmt_mean_std;
use crate::runs::{RunManifest, RECORD_CSV};
use crate::{usage, ReportArgs};

/// One finished run found on disk.
#[derive(Debug, Clone)]
pub struct RunEntry {
    pub dir: PathBuf,
    pub label: String,
    pub seed: Option<u64>,
    pub epochs: usize,
    pub final_test_acc: f64,
    pub best_test_acc: f64,
}

#[derive(Debug, Clone)]
pub struct Group {
    pub label: String,
    pub runs: Vec<RunEntry>,
    pub final_mean: Option<f64>,
    pub final_std: Option<f64>,
    pub best_mean: Option<f64>,
    pub best_std: Option<f64>,
}

/// Mean and sample standard deviation; std is 0 for a single value.
pub fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (Some(mean), Some(std))
}

pub fn write_csv_rows(path: &Path, rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_entry(record_csv: &Path) -> Result<Option<RunEntry>> {
    let dir = record_csv.parent().unwrap_or(Path::new(".")).to_path_buf();
    let rows = RunRecord::read_csv_rows(record_csv)?;
    let Some(last) = rows.last() else {
        return Ok(None);
    };
    let best = rows.iter().map(|r| r.test_acc).fold(f64::NEG_INFINITY, f64::max);
    let (label, seed) = match RunManifest::read(&dir) {
        Ok(m) => (m.label, Some(m.seed)),
        Err(_) => {
            let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            match name.rsplit_once("-s") {
                Some((label, seed)) if seed.parse::<u64>().is_ok() => (label.to_string(), seed.parse().ok()),
                _ => (name, None),
            }
        }
    };
    Ok(Some(RunEntry {
        dir,
        label,
        seed,
        epochs: rows.len(),
        final_test_acc: last.test_acc,
        best_test_acc: best,
    }))
}

/// Every run under `inputs` (directories are searched recursively).
pub fn collect(inputs: &[PathBuf]) -> Result<Vec<RunEntry>> {
    let mut files = Vec::new();
    for input in inputs {
        if !input.exists() {
            return Err(usage(format!("{} does not exist", input.display())));
        }
        if input.is_file() {
            files.push(input.clone());
            continue;
        }
        for entry in WalkDir::new(input).sort_by_file_name() {
            let entry = entry?;
            if entry.file_type().is_file() && entry.file_name() == RECORD_CSV {
                files.push(entry.into_path());
            }
        }
    }
    files.sort();
    files.dedup();
    let mut out = Vec::new();
    for f in files {
        if let Some(e) = read_entry(&f)? {
            out.push(e);
        }
    }
    Ok(out)
}

#[derive(Debug, PartialEq, PartialOrd)]
enum SortKey {
    Mode(usize),
    Number(f64),
    Text(String),
}

fn sort_key(label: &str) -> SortKey {
    if let Ok(m) = label.parse::<AblationMode>() {
        return SortKey::Mode(AblationMode::ALL.iter().position(|&x| x == m).unwrap_or(0));
    }
    if let Some(v) = label.split_once('=').and_then(|(_, v)| v.parse().ok()) {
        return SortKey::Number(v);
    }
    SortKey::Text(label.to_string())
}

/// Group runs by label; ablation modes come in ladder order, `name=value`
/// labels numerically.
pub fn group(entries: Vec<RunEntry>) -> Vec<Group> {
    let mut by_label: BTreeMap<String, Vec<RunEntry>> = BTreeMap::new();
    for e in entries {
        by_label.entry(e.label.clone()).or_default().push(e);
    }
    let mut groups: Vec<Group> = by_label
        .into_iter()
        .map(|(label, runs)| {
            let finals: Vec<f64> = runs.iter().map(|r| r.final_test_acc).collect();
            let bests: Vec<f64> = runs.iter().map(|r| r.best_test_acc).collect();
            let (final_mean, final_std) = mean_std(&finals);
            let (best_mean, best_std) = mean_std(&bests);
            Group {
                label,
                runs,
                final_mean,
                final_std,
                best_mean,
                best_std,
            }
        })
        .collect();
    groups.sort_by(|a, b| {
        sort_key(&a.label)
            .partial_cmp(&sort_key(&b.label))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    groups
}

pub fn render(groups: &[Group]) -> String {
    let width = groups.iter().map(|g| g.label.len()).max().unwrap_or(5).max(5);
    let mut s = format!("{:<width$}  {:>3}  {:>16}  {:>16}\n", "label", "n", "final test acc", "best test acc");
    for g in groups {
        s.push_str(&format!(
            "{:<width$}  {:>3}  {:>16}  {:>16}\n",
            g.label,
            g.runs.len(),
            fmt_mean_std(g.final_mean, g.final_std),
            fmt_mean_std(g.best_mean, g.best_std)
        ));
    }
    s
}

pub fn run(a: &ReportArgs) -> Result<()> {
    if a.inputs.is_empty() {
        return Err(usage("report needs at least one run directory or record.csv"));
    }
    let entries = collect(&a.inputs)?;
    if entries.is_empty() {
        return Err(usage("no record.csv files found under the given inputs"));
    }
    let groups = group(entries);
    print!("{}", render(&groups));
    if let Some(path) = &a.csv {
        let mut rows = vec![["label", "n", "final_mean", "final_std", "best_mean", "best_std"]
            .map(String::from)
            .to_vec()];
        let f = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        for g in &groups {
            rows.push(vec![
                g.label.clone(),
                g.runs.len().to_string(),
                f(g.final_mean),
                f(g.final_std),
                f(g.best_mean),
                f(g.best_std),
            ]);
        }
        write_csv_rows(path, &rows)?;
    }
    Ok(())
}
