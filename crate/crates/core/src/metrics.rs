//! Append-only JSONL metrics log: one line per training step, plus
//! validation summaries and per-layer gradient probes.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub iter: u64,
    pub lr: f64,
    pub sup: f64,
    pub con: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cam: Option<f64>,
    pub beta: f64,
    pub total: f64,
}

/// One validation pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub epoch: usize,
    pub miou: f64,
    pub pixel_accuracy: f64,
}

/// One gradient-magnitude probe: mean |grad| of the consistency loss per
/// named layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeEntry {
    pub epoch: usize,
    pub loss: String,
    pub layers: Vec<(String, f64)>,
}

/// A parsed metrics line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricsRecord {
    Step(StepRecord),
    Eval(EvalEntry),
    Probe(ProbeEntry),
}

/// Line-buffered JSONL writer; `append` keeps earlier records on resume.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path, append: bool) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(record)?;
        writeln!(self.out, "{line}").map_err(|e| Error::Io {
            path: "<metrics>".into(),
            source: e,
        })
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::Io {
            path: "<metrics>".into(),
            source: e,
        })
    }
}

/// Read a whole metrics file back; bad lines fail with their line number.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricsRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Dataset(format!("metrics line {}: {e}", i + 1))
        })?;
        records.push(rec);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_round_trip_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut w = MetricsWriter::create(&path, false).unwrap();
        let step = MetricsRecord::Step(StepRecord {
            epoch: 0,
            iter: 1,
            lr: 0.1,
            sup: 1.25,
            con: 0.5,
            cam: None,
            beta: 0.0067,
            total: 1.25335,
        });
        let eval = MetricsRecord::Eval(EvalEntry {
            epoch: 0,
            miou: 0.42,
            pixel_accuracy: 0.9,
        });
        let probe = MetricsRecord::Probe(ProbeEntry {
            epoch: 0,
            loss: "conf_ce".into(),
            layers: vec![("encoder.conv1".into(), 1e-3)],
        });
        w.write(&step).unwrap();
        w.write(&eval).unwrap();
        w.write(&probe).unwrap();
        w.flush().unwrap();
        let got = read_metrics(&path).unwrap();
        assert_eq!(got, vec![step, eval, probe]);
    }

    #[test]
    fn append_mode_preserves_existing_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let rec = |i: u64| {
            MetricsRecord::Step(StepRecord {
                epoch: 0,
                iter: i,
                lr: 0.1,
                sup: 0.0,
                con: 0.0,
                cam: None,
                beta: 0.0,
                total: 0.0,
            })
        };
        let mut w = MetricsWriter::create(&path, false).unwrap();
        w.write(&rec(1)).unwrap();
        w.flush().unwrap();
        drop(w);
        let mut w = MetricsWriter::create(&path, true).unwrap();
        w.write(&rec(2)).unwrap();
        w.flush().unwrap();
        drop(w);
        assert_eq!(read_metrics(&path).unwrap(), vec![rec(1), rec(2)]);
    }

    #[test]
    fn truncate_mode_starts_fresh() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        std::fs::write(&path, "{\"kind\":\"eval\",\"epoch\":9,\"miou\":0.1,\"pixel_accuracy\":0.2}\n").unwrap();
        let w = MetricsWriter::create(&path, false).unwrap();
        drop(w);
        assert!(read_metrics(&path).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        std::fs::write(&path, "{\"kind\":\"eval\",\"epoch\":0,\"miou\":0.1,\"pixel_accuracy\":0.2}\nnot json\n").unwrap();
        let err = read_metrics(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
