//! Training data plumbing: truncated-BPTT batching for language modeling
//! and labeled datasets for classification.

use std::path::Path;

use crate::error::TrainError;

/// One BPTT window: `input[t][b]` and its one-step-ahead `target[t][b]`,
/// both row-major over `[seq_len, batch]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpttWindow {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    pub seq_len: usize,
    pub batch: usize,
}

/// Result of slicing a token stream for truncated BPTT. The stream splits
/// into `batch` contiguous strips; windows advance through all strips in
/// lock-step so recurrent state can persist across window boundaries.
#[derive(Clone, Debug)]
pub struct BpttBatches {
    pub windows: Vec<BpttWindow>,
    /// Tokens discarded: the tail that does not divide evenly into strips,
    /// plus the final token of each strip (which can only ever be a target).
    pub dropped_tokens: usize,
}

/// Split `stream` into `batch` strips and cut non-overlapping windows of at
/// most `bptt` steps. Targets are inputs shifted by one within the strip.
pub fn bptt_batchify(stream: &[usize], batch: usize, bptt: usize) -> Result<BpttBatches, TrainError> {
    if batch == 0 || bptt == 0 {
        return Err(TrainError::StreamTooShort { len: stream.len(), batch: batch.max(1) });
    }
    if stream.len() < batch * 2 {
        return Err(TrainError::StreamTooShort { len: stream.len(), batch });
    }
    let strip_len = stream.len() / batch;
    let mut windows = Vec::new();
    let mut offset = 0;
    while offset + 1 < strip_len {
        let seq_len = bptt.min(strip_len - 1 - offset);
        let mut input = vec![0usize; seq_len * batch];
        let mut target = vec![0usize; seq_len * batch];
        for t in 0..seq_len {
            for b in 0..batch {
                input[t * batch + b] = stream[b * strip_len + offset + t];
                target[t * batch + b] = stream[b * strip_len + offset + t + 1];
            }
        }
        windows.push(BpttWindow { input, target, seq_len, batch });
        offset += seq_len;
    }
    // Remainder beyond the strips, plus one per-strip token that is only
    // ever predicted, never fed.
    let consumed: usize = windows.iter().map(|w| w.seq_len * w.batch).sum();
    Ok(BpttBatches { windows, dropped_tokens: stream.len() - consumed })
}

/// Classification examples with dense class ids.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub texts: Vec<String>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl LabeledDataset {
    pub fn new(texts: Vec<String>, labels: Vec<usize>, n_classes: usize) -> Result<Self, TrainError> {
        if texts.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        for (line, label) in labels.iter().enumerate() {
            if *label >= n_classes {
                return Err(TrainError::BadClassId { id: *label, classes: n_classes, line: line + 1 });
            }
        }
        for (line, text) in texts.iter().enumerate() {
            if text.trim().is_empty() {
                return Err(TrainError::EmptyText { line: line + 1 });
            }
        }
        Ok(LabeledDataset { texts, labels, n_classes })
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    /// Read `<class>\t<text>` lines. Class ids must be dense in `[0, K)`
    /// with K inferred as max+1.
    pub fn from_tsv(path: &Path) -> Result<Self, TrainError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| TrainError::Io { path: path.display().to_string(), source: e })?;
        let mut texts = Vec::new();
        let mut labels = Vec::new();
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (class_str, text) = line.split_once('\t').ok_or(TrainError::BadLine {
                line: i + 1,
                what: "expected <class>\\t<text>".into(),
            })?;
            let label: usize = class_str.trim().parse().map_err(|_| TrainError::BadLine {
                line: i + 1,
                what: format!("class id `{class_str}` is not a non-negative integer"),
            })?;
            if text.trim().is_empty() {
                return Err(TrainError::EmptyText { line: i + 1 });
            }
            texts.push(text.to_string());
            labels.push(label);
        }
        if texts.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let n_classes = labels.iter().max().unwrap() + 1;
        LabeledDataset::new(texts, labels, n_classes)
    }
}
