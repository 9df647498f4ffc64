//! Shared training plumbing: per-sample gradient accumulation and metric logs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Bound, GradAccum, ParamStore, Tape, Var};

/// Builds one tape per sample, back-propagates each loss and sums the
/// gradients in sample order. Returns the accumulator and each sample's
/// auxiliary output.
pub fn sample_grads<T, F>(store: &ParamStore, n: usize, f: F) -> Result<(GradAccum, Vec<T>)>
where
    T: Send,
    F: Fn(usize, &mut Tape, &Bound) -> Result<(Var, T)> + Sync + Send,
{
    let per_sample = crate::par::map_range(n, |i| -> Result<(GradAccum, T)> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, true)?;
        let (loss, aux) = f(i, &mut tape, &bound)?;
        let grads = tape.backward(loss)?;
        let mut acc = GradAccum::new(store);
        acc.add(&bound, &grads)?;
        Ok((acc, aux))
    });
    let mut total = GradAccum::new(store);
    let mut auxes = Vec::with_capacity(n);
    for r in per_sample {
        let (acc, aux) = r?;
        total.merge(&acc);
        auxes.push(aux);
    }
    Ok((total, auxes))
}

/// One line of a metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub loss_name: String,
    pub value: f64,
}

/// In-memory metric records, optionally mirrored to a JSON-lines file.
#[derive(Debug, Default)]
pub struct MetricsLog {
    records: Vec<MetricRecord>,
    sink: Option<BufWriter<File>>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        Ok(Self {
            records: Vec::new(),
            sink: Some(BufWriter::new(File::create(path)?)),
        })
    }

    pub fn log(&mut self, step: usize, name: &str, value: f64) -> Result<()> {
        let rec = MetricRecord {
            step,
            loss_name: name.to_string(),
            value,
        };
        if let Some(w) = &mut self.sink {
            // serde_json writes non-finite numbers as null; keep them visible.
            if value.is_finite() {
                serde_json::to_writer(&mut *w, &rec)?;
            } else {
                write!(w, "{{\"step\":{step},\"loss_name\":{:?},\"value\":\"{value}\"}}", name)?;
            }
            writeln!(w)?;
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.sink {
            w.flush()?;
        }
        Ok(())
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    /// `(step, value)` pairs of one metric.
    pub fn series(&self, name: &str) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter(|r| r.loss_name == name)
            .map(|r| (r.step, r.value))
            .collect()
    }

    pub fn last(&self, name: &str) -> Option<f64> {
        self.records.iter().rev().find(|r| r.loss_name == name).map(|r| r.value)
    }
}

impl Drop for MetricsLog {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

/// Reads a JSON-lines metrics file written by [`MetricsLog`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)?;
        let bad = || Error::Format {
            kind: "metrics",
            path: PathBuf::from(path),
            reason: format!("line {}: malformed record", i + 1),
        };
        let value = match &v["value"] {
            serde_json::Value::Number(n) => n.as_f64().ok_or_else(bad)?,
            serde_json::Value::String(s) => s.parse::<f64>().map_err(|_| bad())?,
            _ => return Err(bad()),
        };
        out.push(MetricRecord {
            step: v["step"].as_u64().ok_or_else(bad)? as usize,
            loss_name: v["loss_name"].as_str().ok_or_else(bad)?.to_string(),
            value,
        });
    }
    Ok(out)
}

/// Mean of per-sample values.
pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}
