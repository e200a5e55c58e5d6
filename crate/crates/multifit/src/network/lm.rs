//! Language model: embedding, recurrent stack, and a decoder that shares
//! the embedding matrix (weight tying), plus training-time dropout.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::NetworkError;
use crate::tensor::Tensor;

use super::cell::config_cell;
use super::{bind_params, DropoutRates, ModelConfig, Parameters, RecurrentState, TapeBinding};

/// A language model is its configuration plus named parameters. The
/// decoder weight is the embedding matrix itself; only the decoder bias
/// is decoder-specific.
#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub config: ModelConfig,
    pub params: Parameters,
}

/// Initialize parameters: embeddings uniform in ±0.1, convolution and
/// recurrence weights uniform scaled by 1/sqrt(fan-in), biases zero.
pub fn build_language_model(config: &ModelConfig, seed: u64) -> Result<LanguageModel, NetworkError> {
    config.validate()?;
    let cell = config_cell(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Parameters::new();
    params.insert(
        "embedding",
        Tensor::uniform(vec![config.vocab_size, config.emb_dim], 0.1, &mut rng),
    );
    for l in 0..config.n_layers {
        let (in_dim, out_dim) = config.layer_dims(l);
        cell.init_layer(&mut params, l, in_dim, out_dim, config.qrnn_widths[l], &mut rng);
    }
    params.insert("decoder.bias", Tensor::zeros(vec![config.vocab_size]));
    Ok(LanguageModel { config: config.clone(), params })
}

/// Training-time stochastic masks; `None` means evaluation mode (no
/// dropout anywhere, deterministic forward).
pub struct DropoutPlan<'r> {
    pub rates: DropoutRates,
    pub rng: &'r mut ChaCha8Rng,
}

/// Inverted-dropout mask: zero with probability `rate`, else 1/(1-rate).
pub(crate) fn dropout_mask(rng: &mut ChaCha8Rng, shape: Vec<usize>, rate: f64) -> Option<Tensor> {
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 - rate;
    let n = shape.iter().product();
    let data = (0..n).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { 1.0 / keep }).collect();
    Some(Tensor::new(shape, data).expect("mask shape"))
}

/// Embedding dropout zeroes whole vectors per token position.
fn embedding_dropout_mask(
    rng: &mut ChaCha8Rng,
    t: usize,
    b: usize,
    e: usize,
    rate: f64,
) -> Option<Tensor> {
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 - rate;
    let mut data = vec![0.0; t * b * e];
    for pos in 0..t * b {
        let v = if rng.gen::<f64>() < rate { 0.0 } else { 1.0 / keep };
        data[pos * e..(pos + 1) * e].fill(v);
    }
    Some(Tensor::new(vec![t, b, e], data).expect("mask shape"))
}

/// Zoneout mask: 1 marks a dropped channel (forget gate forced to carry).
fn zoneout_mask(rng: &mut ChaCha8Rng, shape: Vec<usize>, rate: f64) -> Option<Tensor> {
    if rate <= 0.0 {
        return None;
    }
    let n = shape.iter().product();
    let data = (0..n).map(|_| if rng.gen::<f64>() < rate { 1.0 } else { 0.0 }).collect();
    Some(Tensor::new(shape, data).expect("mask shape"))
}

fn apply_mask(tape: &mut Tape, x: Var, mask: Option<Tensor>) -> Result<Var, NetworkError> {
    match mask {
        Some(m) => {
            let mv = tape.leaf(m);
            Ok(tape.mul(x, mv)?)
        }
        None => Ok(x),
    }
}

/// Encoder forward: embedding and the recurrent stack, without the
/// decoder. Returns the last layer's hidden states `[T,B,emb_dim]`.
pub fn encoder_forward(
    tape: &mut Tape,
    binding: &TapeBinding,
    config: &ModelConfig,
    ids: &[usize],
    t: usize,
    b: usize,
    state: &mut RecurrentState,
    mut dropout: Option<&mut DropoutPlan<'_>>,
) -> Result<Var, NetworkError> {
    let cell = config_cell(config)?;
    let table = binding.var("embedding")?;
    let mut x = tape.embed(table, ids, t, b)?;
    if let Some(plan) = dropout.as_deref_mut() {
        let mask = embedding_dropout_mask(plan.rng, t, b, config.emb_dim, plan.rates.embedding);
        x = apply_mask(tape, x, mask)?;
    }
    for l in 0..config.n_layers {
        let (in_dim, out_dim) = config.layer_dims(l);
        if l > 0 {
            if let Some(plan) = dropout.as_deref_mut() {
                let mask = dropout_mask(plan.rng, vec![t, b, in_dim], plan.rates.input);
                x = apply_mask(tape, x, mask)?;
            }
        }
        let zmask = match dropout.as_deref_mut() {
            Some(plan) => zoneout_mask(plan.rng, vec![t, b, out_dim], plan.rates.hidden),
            None => None,
        };
        x = cell.forward(tape, binding, l, x, &mut state.layers[l], zmask.as_ref())?;
    }
    Ok(x)
}

/// Full language-model forward: encoder, output dropout, tied decoder.
/// Returns unnormalized logits `[T,B,vocab]`.
pub fn lm_forward(
    tape: &mut Tape,
    binding: &TapeBinding,
    config: &ModelConfig,
    ids: &[usize],
    t: usize,
    b: usize,
    state: &mut RecurrentState,
    mut dropout: Option<&mut DropoutPlan<'_>>,
) -> Result<Var, NetworkError> {
    let mut h = encoder_forward(tape, binding, config, ids, t, b, state, dropout.as_deref_mut())?;
    if let Some(plan) = dropout.as_deref_mut() {
        let mask = dropout_mask(plan.rng, vec![t, b, config.emb_dim], plan.rates.output);
        h = apply_mask(tape, h, mask)?;
    }
    let table = binding.var("embedding")?;
    let logits = tape.matmul_nt(h, table)?;
    let bias = binding.var("decoder.bias")?;
    Ok(tape.add_bias(logits, bias)?)
}

/// Convenience wrapper that binds parameters and runs one evaluation-mode
/// forward on a fresh tape.
pub fn lm_eval_logits(
    model: &LanguageModel,
    tape: &mut Tape,
    ids: &[usize],
    t: usize,
    b: usize,
    state: &mut RecurrentState,
) -> Result<(TapeBinding, Var), NetworkError> {
    let binding = bind_params(tape, &model.params);
    let logits = lm_forward(tape, &binding, &model.config, ids, t, b, state, None)?;
    Ok((binding, logits))
}
