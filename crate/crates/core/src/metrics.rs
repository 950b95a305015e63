//! Line-delimited JSON metrics, one [`StepMetrics`] record per line.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::train::StepMetrics;

pub struct MetricsWriter {
    file: File,
    last_step: Option<u64>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            file: File::create(path)?,
            last_step: None,
        })
    }

    /// Keeps the records before `step` and appends after them, so a resumed
    /// run continues the file of the interrupted one.
    pub fn resume(path: &Path, step: u64) -> Result<Self> {
        let kept: Vec<StepMetrics> = if path.exists() {
            read_metrics(path)?.into_iter().filter(|r| r.step < step).collect()
        } else {
            Vec::new()
        };
        let mut w = Self::create(path)?;
        for r in &kept {
            w.write(r)?;
        }
        w.file = OpenOptions::new().append(true).open(path)?;
        Ok(w)
    }

    /// Appends one record and flushes it.
    pub fn write(&mut self, record: &StepMetrics) -> Result<()> {
        if self.last_step.is_some_and(|s| record.step <= s) {
            return Err(Error::contract(format!(
                "metrics step {} does not follow {}",
                record.step,
                self.last_step.unwrap_or_default()
            )));
        }
        let mut line = serde_json::to_string(record).map_err(|e| Error::Data(e.to_string()))?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()?;
        self.last_step = Some(record.step);
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(r);
    }
    Ok(out)
}

/// Byte-exact file comparison.
pub fn same_bytes(a: &Path, b: &Path) -> Result<bool> {
    Ok(fs::read(a)? == fs::read(b)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(step: u64) -> StepMetrics {
        StepMetrics {
            step,
            loss: 1.5,
            lm_loss: 1.5,
            aux_loss: 2.0,
            lr: 1e-3,
            tau: 5.0,
            grad_norm: 0.5,
            mean_expected_loops: vec![2.5],
            mean_loops: vec![3.0],
            mean_lambda: vec![0.4],
            lambda_min: 0.0,
            lambda_max: 0.75,
            lambda_hist: vec![1; 10],
            expert_load: vec![vec![0.5, 0.5]],
            tokens_per_sec: None,
        }
    }

    #[test]
    fn round_trip_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut w = MetricsWriter::create(&path).unwrap();
        for s in 0..5 {
            w.write(&record(s)).unwrap();
        }
        assert!(w.write(&record(4)).is_err());
        assert_eq!(read_metrics(&path).unwrap(), (0..5).map(record).collect::<Vec<_>>());

        let mut w = MetricsWriter::resume(&path, 3).unwrap();
        w.write(&record(3)).unwrap();
        let back = read_metrics(&path).unwrap();
        assert_eq!(back.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert!(!fs::read_to_string(&path).unwrap().contains("tokens_per_sec"));
    }
}
