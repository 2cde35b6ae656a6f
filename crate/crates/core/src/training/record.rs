use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};

/// One logged epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub ce_loss: f64,
    pub mkdr_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub wall_time: f64,
}

impl EpochRow {
    /// Equality on every field except the wall clock.
    pub fn same_metrics(&self, other: &EpochRow) -> bool {
        EpochRow {
            wall_time: 0.0,
            ..self.clone()
        } == EpochRow {
            wall_time: 0.0,
            ..other.clone()
        }
    }
}

/// Per-epoch metrics plus the configuration they were produced with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub config: serde_json::Value,
    rows: Vec<EpochRow>,
}

impl RunRecord {
    pub fn new(seed: u64, config: serde_json::Value) -> Self {
        Self {
            seed,
            config,
            rows: Vec::new(),
        }
    }

    pub fn rows(&self) -> &[EpochRow] {
        &self.rows
    }

    pub fn push(&mut self, row: EpochRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.epoch <= last.epoch {
                return Err(arg_err(
                    "run record",
                    format!("epoch {} does not follow {}", row.epoch, last.epoch),
                ));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn final_test_acc(&self) -> Option<f64> {
        self.rows.last().map(|r| r.test_acc)
    }

    /// `(epoch, accuracy)` of the best test epoch; earliest wins ties.
    pub fn best_test(&self) -> Option<(usize, f64)> {
        self.rows
            .iter()
            .fold(None, |best: Option<&EpochRow>, r| match best {
                Some(b) if b.test_acc >= r.test_acc => Some(b),
                _ => Some(r),
            })
            .map(|r| (r.epoch, r.test_acc))
    }

    /// Same rows, ignoring wall-clock time and configuration.
    pub fn same_metrics(&self, other: &RunRecord) -> bool {
        self.seed == other.seed
            && self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|(a, b)| a.same_metrics(b))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| csv_err(path, e))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Rows only; pair with [`RunRecord::read_json`] for the configuration.
    pub fn read_csv_rows(path: &Path) -> Result<Vec<EpochRow>> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<RunRecord> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::CorruptDataset {
        path: path.to_path_buf(),
        detail: format!("csv: {e}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize, acc: f64) -> EpochRow {
        EpochRow {
            epoch,
            lr: 0.1,
            train_loss: 1.0 / (epoch + 1) as f64,
            ce_loss: 0.5,
            mkdr_loss: 0.25,
            train_acc: 0.5,
            test_acc: acc,
            wall_time: epoch as f64 * 1.5,
        }
    }

    #[test]
    fn epochs_must_increase() {
        let mut r = RunRecord::new(1, serde_json::json!({}));
        r.push(row(0, 0.1)).unwrap();
        assert!(r.push(row(0, 0.1)).is_err());
        r.push(row(2, 0.3)).unwrap();
        r.push(row(3, 0.3)).unwrap();
        assert_eq!(r.best_test(), Some((2, 0.3)));
        assert_eq!(r.final_test_acc(), Some(0.3));
    }

    #[test]
    fn csv_and_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = RunRecord::new(3, serde_json::json!({"lambda": 0.7}));
        for e in 0..4 {
            r.push(row(e, 0.1 * e as f64 + 1.0 / 3.0)).unwrap();
        }
        r.write_csv(&dir.path().join("r.csv")).unwrap();
        r.write_json(&dir.path().join("r.json")).unwrap();
        assert_eq!(RunRecord::read_csv_rows(&dir.path().join("r.csv")).unwrap(), r.rows());
        assert_eq!(RunRecord::read_json(&dir.path().join("r.json")).unwrap(), r);
        let header = fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert!(header.starts_with("epoch,lr,train_loss,ce_loss,mkdr_loss,train_acc,test_acc,wall_time\n"));
    }
}
