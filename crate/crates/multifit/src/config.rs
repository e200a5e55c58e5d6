//! Run configuration: one flat `key = value` dialect covering every model
//! and training hyperparameter through dotted keys, merged with the
//! precedence defaults < config file < command-line overrides.
//!
//! Setting `model.n_layers` resets `model.qrnn_widths` to the default
//! width profile for that depth; an explicit `model.qrnn_widths` must
//! therefore come after `model.n_layers` when both are given. The
//! schedule's `total_steps` is derived from the data and epoch count at
//! run time and is deliberately not a key.

use std::path::Path;

use crate::error::ConfigError;
use crate::network::{cell_names, ModelConfig};
use crate::train::TrainConfig;

/// The merged settings a command runs with.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { model: ModelConfig::default(), train: TrainConfig::default() }
    }
}

/// Every addressable key, in echo order.
pub const KEYS: &[&str] = &[
    "model.vocab_size",
    "model.emb_dim",
    "model.hidden_dim",
    "model.n_layers",
    "model.qrnn_widths",
    "model.dropout.embedding",
    "model.dropout.input",
    "model.dropout.hidden",
    "model.dropout.output",
    "model.clf_hidden",
    "model.cell",
    "train.bptt",
    "train.lm_batch",
    "train.clf_batch",
    "train.pretrain_epochs",
    "train.finetune_epochs",
    "train.clf_epochs",
    "train.lr_max",
    "train.weight_decay",
    "train.clip_norm",
    "train.label_smooth_eps",
    "train.disc_factor",
    "train.pct_warmup",
    "train.div_start",
    "train.div_final",
    "train.mom_max",
    "train.mom_min",
    "train.val_fraction",
    "train.seed",
];

fn parse_num<T: std::str::FromStr>(
    key: &str,
    value: &str,
    line: Option<usize>,
    wanted: &str,
) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        line,
        what: format!("'{value}' is not {wanted}"),
    })
}

impl RunConfig {
    /// Set one key from its text form. `line` is carried into errors when
    /// the value came from a file.
    pub fn set(&mut self, key: &str, value: &str, line: Option<usize>) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "model.vocab_size" => {
                self.model.vocab_size = parse_num(key, v, line, "a positive integer")?
            }
            "model.emb_dim" => self.model.emb_dim = parse_num(key, v, line, "a positive integer")?,
            "model.hidden_dim" => {
                self.model.hidden_dim = parse_num(key, v, line, "a positive integer")?
            }
            "model.n_layers" => {
                self.model.n_layers = parse_num(key, v, line, "a positive integer")?;
                self.model.qrnn_widths = ModelConfig::default_widths(self.model.n_layers);
            }
            "model.qrnn_widths" => {
                let widths: Result<Vec<usize>, _> =
                    v.split(',').map(|w| w.trim().parse::<usize>()).collect();
                self.model.qrnn_widths = widths.map_err(|_| ConfigError::BadValue {
                    key: key.to_string(),
                    line,
                    what: format!("'{v}' is not a comma-separated list of integers"),
                })?;
            }
            "model.dropout.embedding" => {
                self.model.dropout.embedding = parse_num(key, v, line, "a number")?
            }
            "model.dropout.input" => {
                self.model.dropout.input = parse_num(key, v, line, "a number")?
            }
            "model.dropout.hidden" => {
                self.model.dropout.hidden = parse_num(key, v, line, "a number")?
            }
            "model.dropout.output" => {
                self.model.dropout.output = parse_num(key, v, line, "a number")?
            }
            "model.clf_hidden" => {
                self.model.clf_hidden = parse_num(key, v, line, "a positive integer")?
            }
            "model.cell" => {
                if !cell_names().iter().any(|n| *n == v) {
                    return Err(ConfigError::BadValue {
                        key: key.to_string(),
                        line,
                        what: format!("unknown cell '{v}'; known: {}", cell_names().join(", ")),
                    });
                }
                self.model.cell = v.to_string();
            }
            "train.bptt" => self.train.bptt = parse_num(key, v, line, "a positive integer")?,
            "train.lm_batch" => {
                self.train.lm_batch = parse_num(key, v, line, "a positive integer")?
            }
            "train.clf_batch" => {
                self.train.clf_batch = parse_num(key, v, line, "a positive integer")?
            }
            "train.pretrain_epochs" => {
                self.train.pretrain_epochs = parse_num(key, v, line, "an integer")?
            }
            "train.finetune_epochs" => {
                self.train.finetune_epochs = parse_num(key, v, line, "an integer")?
            }
            "train.clf_epochs" => self.train.clf_epochs = parse_num(key, v, line, "an integer")?,
            "train.lr_max" => self.train.lr_max = parse_num(key, v, line, "a number")?,
            "train.weight_decay" => self.train.weight_decay = parse_num(key, v, line, "a number")?,
            "train.clip_norm" => self.train.clip_norm = parse_num(key, v, line, "a number")?,
            "train.label_smooth_eps" => {
                self.train.label_smooth_eps = parse_num(key, v, line, "a number")?
            }
            "train.disc_factor" => self.train.disc_factor = parse_num(key, v, line, "a number")?,
            "train.pct_warmup" => self.train.pct_warmup = parse_num(key, v, line, "a number")?,
            "train.div_start" => self.train.div_start = parse_num(key, v, line, "a number")?,
            "train.div_final" => self.train.div_final = parse_num(key, v, line, "a number")?,
            "train.mom_max" => self.train.mom_max = parse_num(key, v, line, "a number")?,
            "train.mom_min" => self.train.mom_min = parse_num(key, v, line, "a number")?,
            "train.val_fraction" => self.train.val_fraction = parse_num(key, v, line, "a number")?,
            "train.seed" => self.train.seed = parse_num(key, v, line, "a non-negative integer")?,
            _ => return Err(ConfigError::UnknownKey { key: key.to_string(), line }),
        }
        Ok(())
    }

    /// Current text form of one key; panics on unknown keys (callers pass
    /// entries of [`KEYS`]).
    pub fn get(&self, key: &str) -> String {
        match key {
            "model.vocab_size" => self.model.vocab_size.to_string(),
            "model.emb_dim" => self.model.emb_dim.to_string(),
            "model.hidden_dim" => self.model.hidden_dim.to_string(),
            "model.n_layers" => self.model.n_layers.to_string(),
            "model.qrnn_widths" => {
                let parts: Vec<String> =
                    self.model.qrnn_widths.iter().map(|w| w.to_string()).collect();
                parts.join(",")
            }
            "model.dropout.embedding" => self.model.dropout.embedding.to_string(),
            "model.dropout.input" => self.model.dropout.input.to_string(),
            "model.dropout.hidden" => self.model.dropout.hidden.to_string(),
            "model.dropout.output" => self.model.dropout.output.to_string(),
            "model.clf_hidden" => self.model.clf_hidden.to_string(),
            "model.cell" => self.model.cell.clone(),
            "train.bptt" => self.train.bptt.to_string(),
            "train.lm_batch" => self.train.lm_batch.to_string(),
            "train.clf_batch" => self.train.clf_batch.to_string(),
            "train.pretrain_epochs" => self.train.pretrain_epochs.to_string(),
            "train.finetune_epochs" => self.train.finetune_epochs.to_string(),
            "train.clf_epochs" => self.train.clf_epochs.to_string(),
            "train.lr_max" => self.train.lr_max.to_string(),
            "train.weight_decay" => self.train.weight_decay.to_string(),
            "train.clip_norm" => self.train.clip_norm.to_string(),
            "train.label_smooth_eps" => self.train.label_smooth_eps.to_string(),
            "train.disc_factor" => self.train.disc_factor.to_string(),
            "train.pct_warmup" => self.train.pct_warmup.to_string(),
            "train.div_start" => self.train.div_start.to_string(),
            "train.div_final" => self.train.div_final.to_string(),
            "train.mom_max" => self.train.mom_max.to_string(),
            "train.mom_min" => self.train.mom_min.to_string(),
            "train.val_fraction" => self.train.val_fraction.to_string(),
            "train.seed" => self.train.seed.to_string(),
            other => panic!("no such config key {other}"),
        }
    }

    /// Apply a config file body: `key = value` lines, `#` comments and
    /// blank lines ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or(ConfigError::BadLine { line: lineno })?;
            self.set(key.trim(), value, Some(lineno))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text)
    }

    /// Apply `key=value` override pairs (command-line layer; no line info).
    pub fn apply_overrides(&mut self, pairs: &[(String, String)]) -> Result<(), ConfigError> {
        for (key, value) in pairs {
            self.set(key, value, None)?;
        }
        Ok(())
    }

    /// The full effective configuration as parseable `key = value` lines,
    /// echoed into metrics streams and checkpoints.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&self.get(key));
            out.push('\n');
        }
        out
    }
}

/// Merge defaults, an optional config file, and override pairs.
pub fn load_config(
    path: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    if let Some(p) = path {
        cfg.apply_file(p)?;
    }
    cfg.apply_overrides(overrides)?;
    Ok(cfg)
}
