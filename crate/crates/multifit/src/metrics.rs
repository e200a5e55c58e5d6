//! Metrics stream: one JSON object per line. The first line echoes the
//! full effective configuration; after it come training records with
//! stage, epoch, step, split, loss, perplexity (language-model stages),
//! accuracy (classifier stages), lr, momentum, and wallclock_ms. Records
//! arrive once per epoch and split and each is flushed on write, so the
//! stream is complete after every epoch even if the process dies.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde_json::json;

use crate::train::{MetricRecord, TrainObserver};

/// One record as a self-contained JSON line.
pub fn record_to_json(record: &MetricRecord) -> String {
    let mut value = json!({
        "stage": record.stage,
        "epoch": record.epoch,
        "step": record.step,
        "split": record.split,
        "loss": record.loss,
        "lr": record.lr,
        "momentum": record.momentum,
        "wallclock_ms": record.wallclock_ms as u64,
    });
    let map = value.as_object_mut().expect("constructed as an object");
    if let Some(p) = record.perplexity {
        map.insert("perplexity".into(), json!(p));
    }
    if let Some(a) = record.accuracy {
        map.insert("accuracy".into(), json!(a));
    }
    value.to_string()
}

/// Writes the metrics stream; implements [`TrainObserver`] so training
/// stages can emit directly into it.
pub struct MetricsWriter<W: Write> {
    out: W,
    /// First write error, surfaced by [`MetricsWriter::finish`]; the
    /// observer callback itself cannot fail.
    error: Option<std::io::Error>,
}

impl MetricsWriter<BufWriter<File>> {
    /// Create the file and write the config echo as the first line.
    pub fn create(path: &Path, config_echo: &str) -> std::io::Result<Self> {
        let file = File::create(path)?;
        let mut w = MetricsWriter { out: BufWriter::new(file), error: None };
        w.write_config(config_echo)?;
        Ok(w)
    }
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Self {
        MetricsWriter { out, error: None }
    }

    pub fn write_config(&mut self, config_echo: &str) -> std::io::Result<()> {
        let line = json!({ "stage": "config", "config": config_echo }).to_string();
        writeln!(self.out, "{line}")?;
        self.out.flush()
    }

    pub fn write_record(&mut self, record: &MetricRecord) -> std::io::Result<()> {
        writeln!(self.out, "{}", record_to_json(record))?;
        self.out.flush()
    }

    /// Surface any write error swallowed during observation.
    pub fn finish(self) -> std::io::Result<()> {
        match self.error {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

impl<W: Write> TrainObserver for MetricsWriter<W> {
    fn record(&mut self, record: &MetricRecord) {
        if self.error.is_none() {
            if let Err(e) = self.write_record(record) {
                self.error = Some(e);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(split: &'static str, ppl: Option<f64>, acc: Option<f64>) -> MetricRecord {
        MetricRecord {
            stage: "pretrain",
            epoch: 1,
            step: 10,
            split,
            loss: 2.0,
            perplexity: ppl,
            accuracy: acc,
            lr: 3e-3,
            momentum: 0.9,
            wallclock_ms: 1234,
        }
    }

    #[test]
    fn each_line_parses_independently_and_carries_the_fields() {
        let mut w = MetricsWriter::new(Vec::new());
        w.write_config("train.seed = 1\n").unwrap();
        w.record(&sample("train", Some((2.0f64).exp()), None));
        w.record(&sample("valid", None, Some(0.9)));
        let text = String::from_utf8(w.out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        let config: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(config["stage"], "config");
        assert!(config["config"].as_str().unwrap().contains("train.seed = 1"));
        let first: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(first["stage"], "pretrain");
        assert_eq!(first["split"], "train");
        assert_eq!(first["epoch"], 1);
        assert_eq!(first["step"], 10);
        assert_eq!(first["wallclock_ms"], 1234);
        // Perplexity recomputed from the loss field must agree.
        let loss = first["loss"].as_f64().unwrap();
        let ppl = first["perplexity"].as_f64().unwrap();
        assert!((ppl - loss.exp()).abs() < 1e-12);
        assert!(first.get("accuracy").is_none());
        let second: serde_json::Value = serde_json::from_str(lines[2]).unwrap();
        assert_eq!(second["accuracy"].as_f64().unwrap(), 0.9);
        assert!(second.get("perplexity").is_none());
    }

    #[test]
    fn file_writer_flushes_every_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut w = MetricsWriter::create(&path, "train.seed = 7\n").unwrap();
        w.record(&sample("train", Some(7.0), None));
        // Read back before dropping the writer: the record must already
        // be on disk.
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        w.finish().unwrap();
    }
}
