//! Model architecture: subword embedding, a stack of recurrent layers
//! (QRNN by default, LSTM as a registered alternative), a tied-weight
//! decoder for language modelling, and a pooled two-layer classifier head.

pub mod cell;
pub mod classifier;
pub mod lm;

use indexmap::IndexMap;

use crate::autodiff::{Tape, Var};
use crate::error::NetworkError;
use crate::tensor::Tensor;

pub use cell::{cell, cell_names, RecurrentCell};
pub use classifier::{build_classifier, classifier_forward, transfer_encoder, TextClassifier};
pub use lm::{
    build_language_model, encoder_forward, lm_eval_logits, lm_forward, DropoutPlan, LanguageModel,
};

/// Dropout rates by placement; each stage scales all four by one multiplier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutRates {
    /// Whole embedding vectors dropped per token position.
    pub embedding: f64,
    /// Element dropout on inputs of layers after the first.
    pub input: f64,
    /// Zoneout on forget gates: dropped channels carry the previous cell.
    pub hidden: f64,
    /// Element dropout on the final hidden states before the decoder.
    pub output: f64,
}

impl Default for DropoutRates {
    fn default() -> Self {
        DropoutRates { embedding: 0.1, input: 0.15, hidden: 0.15, output: 0.25 }
    }
}

impl DropoutRates {
    pub fn scaled(&self, multiplier: f64) -> DropoutRates {
        DropoutRates {
            embedding: self.embedding * multiplier,
            input: self.input * multiplier,
            hidden: self.hidden * multiplier,
            output: self.output * multiplier,
        }
    }
}

/// Architecture hyper-parameters shared by the language model and the
/// classifier encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    /// Per-layer causal convolution width (QRNN only).
    pub qrnn_widths: Vec<usize>,
    pub dropout: DropoutRates,
    /// Hidden width of the classifier head's first linear layer.
    pub clf_hidden: usize,
    /// Recurrent cell registry name: "qrnn" or "lstm".
    pub cell: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 15_000,
            emb_dim: 400,
            hidden_dim: 1550,
            n_layers: 4,
            qrnn_widths: Self::default_widths(4),
            dropout: DropoutRates::default(),
            clf_hidden: 50,
            cell: "qrnn".to_string(),
        }
    }
}

impl ModelConfig {
    /// Width 2 on the first layer, 1 thereafter.
    pub fn default_widths(n_layers: usize) -> Vec<usize> {
        (0..n_layers).map(|l| if l == 0 { 2 } else { 1 }).collect()
    }

    /// Small dimensions for tests and gradient checks.
    pub fn tiny(vocab_size: usize, emb_dim: usize, hidden_dim: usize, n_layers: usize) -> Self {
        ModelConfig {
            vocab_size,
            emb_dim,
            hidden_dim,
            n_layers,
            qrnn_widths: Self::default_widths(n_layers),
            clf_hidden: 8,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |what: String| {
            Err(NetworkError::Numerics(crate::error::NumericsError::InvalidConfig { what }))
        };
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1".into());
        }
        if self.emb_dim == 0 || self.hidden_dim == 0 || self.vocab_size == 0 {
            return bad("vocab_size, emb_dim, hidden_dim must be at least 1".into());
        }
        if self.qrnn_widths.len() != self.n_layers {
            return bad(format!(
                "{} conv widths for {} layers",
                self.qrnn_widths.len(),
                self.n_layers
            ));
        }
        if self.qrnn_widths.iter().any(|&w| w == 0) {
            return bad("conv widths must be at least 1".into());
        }
        if self.clf_hidden == 0 {
            return bad("clf_hidden must be at least 1".into());
        }
        cell(&self.cell)?;
        Ok(())
    }

    /// Input and output dimensions of layer `l`: the first layer reads the
    /// embedding, the last projects back to `emb_dim` so the decoder can
    /// share the embedding matrix.
    pub fn layer_dims(&self, l: usize) -> (usize, usize) {
        let input = if l == 0 { self.emb_dim } else { self.hidden_dim };
        let output = if l + 1 == self.n_layers { self.emb_dim } else { self.hidden_dim };
        (input, output)
    }
}

/// Named tensors. Iteration order is insertion order and defines the
/// parameter order used by the optimizer and gradient bindings. Buffers
/// (running statistics) are carried alongside but never receive gradients.
#[derive(Clone, Debug, Default)]
pub struct Parameters {
    tensors: IndexMap<String, Tensor>,
    buffers: indexmap::IndexSet<String>,
}

impl Parameters {
    pub fn new() -> Self {
        Parameters::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        assert!(
            self.tensors.insert(name.to_string(), t).is_none(),
            "duplicate parameter name {name}"
        );
    }

    /// Insert a non-trainable buffer (e.g. batch-norm running statistics).
    pub fn insert_buffer(&mut self, name: &str, t: Tensor) {
        self.insert(name, t);
        self.buffers.insert(name.to_string());
    }

    pub fn is_buffer(&self, name: &str) -> bool {
        self.buffers.contains(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, NetworkError> {
        self.tensors.get(name).ok_or_else(|| NetworkError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, NetworkError> {
        self.tensors.get_mut(name).ok_or_else(|| NetworkError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Trainable tensors only, in insertion order.
    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().filter(|(k, _)| !self.buffers.contains(k.as_str())).map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.trainable().map(|(k, _)| k.to_string()).collect()
    }

    /// Mutable references to the trainable tensors, in insertion order.
    pub fn trainable_mut(&mut self) -> Vec<(&str, &mut Tensor)> {
        let buffers = &self.buffers;
        self.tensors
            .iter_mut()
            .filter(|(k, _)| !buffers.contains(k.as_str()))
            .map(|(k, v)| (k.as_str(), v))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of trainable scalar values.
    pub fn total_values(&self) -> usize {
        self.trainable().map(|(_, t)| t.numel()).sum()
    }
}

/// Tape registration of a parameter set: each trainable tensor becomes a
/// parameter leaf; names resolve to tape variables.
pub struct TapeBinding {
    vars: IndexMap<String, Var>,
}

impl TapeBinding {
    /// Assemble a binding from explicit name-to-variable pairs (gradient
    /// harnesses that register parameters themselves).
    pub fn from_vars(vars: IndexMap<String, Var>) -> Self {
        TapeBinding { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var, NetworkError> {
        self.vars.get(name).copied().ok_or_else(|| NetworkError::MissingParam(name.to_string()))
    }

    /// Variables in parameter insertion order (matches optimizer order).
    pub fn ordered_vars(&self) -> Vec<Var> {
        self.vars.values().copied().collect()
    }
}

pub fn bind_params(tape: &mut Tape, params: &Parameters) -> TapeBinding {
    let mut vars = IndexMap::new();
    for (name, tensor) in params.trainable() {
        vars.insert(name.to_string(), tape.param(tensor.clone()));
    }
    TapeBinding { vars }
}

/// Per-layer recurrent carry, reset per stream and detached between
/// windows: gradients never flow across window boundaries. `conv_ctx`
/// holds the last `width-1` input frames so wide causal convolutions see
/// across window boundaries exactly as one long forward would.
#[derive(Clone, Debug)]
pub struct LayerState {
    pub h: Tensor,
    pub c: Tensor,
    pub conv_ctx: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct RecurrentState {
    pub layers: Vec<LayerState>,
}

impl RecurrentState {
    pub fn zeros(config: &ModelConfig, batch: usize) -> Self {
        let layers = (0..config.n_layers)
            .map(|l| {
                let (_, out) = config.layer_dims(l);
                LayerState {
                    h: Tensor::zeros(vec![batch, out]),
                    c: Tensor::zeros(vec![batch, out]),
                    conv_ctx: None,
                }
            })
            .collect();
        RecurrentState { layers }
    }
}

/// Learning-rate group of a parameter: the embedding is the lowest group,
/// recurrent layers follow in depth order, and the decoder/head is the
/// highest (largest learning rate under discriminative scaling).
pub fn param_group(name: &str, n_layers: usize) -> usize {
    if name == "embedding" {
        return 0;
    }
    if let Some(rest) = name.strip_prefix("layer") {
        if let Some(idx) = rest.split('.').next().and_then(|s| s.parse::<usize>().ok()) {
            return idx + 1;
        }
    }
    n_layers + 1
}

/// Number of learning-rate groups for a model with `n_layers` layers.
pub fn n_param_groups(n_layers: usize) -> usize {
    n_layers + 2
}
