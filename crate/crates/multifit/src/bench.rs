//! Per-batch training-speed benchmark: times one full training step
//! (forward, backward, clip, optimizer update) for each recurrent cell on
//! an identical token stream, reporting the median over timed repetitions
//! after fixed warmup iterations.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Precision, Tape};
use crate::error::{NumericsError, TrainError};
use crate::network::{
    bind_params, build_language_model, cell_names, lm_forward, ModelConfig, RecurrentState,
};
use crate::optim::{adam_step, clip_global_norm, OptimizerState};
use crate::tensor::Tensor;

/// Warmup iterations excluded from the timing.
pub const WARMUP_REPS: usize = 3;

#[derive(Clone, Copy, Debug)]
pub struct BenchSpec {
    pub vocab: usize,
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub bptt: usize,
    pub batch: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            vocab: 1000,
            emb_dim: 64,
            hidden_dim: 64,
            n_layers: 2,
            bptt: 70,
            batch: 64,
            reps: 9,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub cell: String,
    pub per_batch_ms: f64,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// LSTM time divided by QRNN time: how many times faster the QRNN
    /// trains per batch.
    pub speedup: f64,
}

pub(crate) fn median(samples: &[f64]) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("timings are finite"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Median per-batch training time in milliseconds for one cell.
pub fn time_cell(cell: &str, spec: &BenchSpec) -> Result<f64, TrainError> {
    if spec.reps < 5 {
        return Err(TrainError::Numerics(NumericsError::InvalidConfig {
            what: format!("{} repetitions cannot support a median; need at least 5", spec.reps),
        }));
    }
    let config = ModelConfig {
        vocab_size: spec.vocab,
        emb_dim: spec.emb_dim,
        hidden_dim: spec.hidden_dim,
        n_layers: spec.n_layers,
        qrnn_widths: ModelConfig::default_widths(spec.n_layers),
        cell: cell.to_string(),
        ..ModelConfig::default()
    };
    let mut lm = build_language_model(&config, spec.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.bptt * spec.batch;
    let ids: Vec<usize> = (0..n).map(|_| rng.gen_range(0..spec.vocab)).collect();
    let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..spec.vocab)).collect();
    let mut state = RecurrentState::zeros(&config, spec.batch);
    let mut opt = OptimizerState::new(lm.params.trainable_names().len());
    let mut samples = Vec::with_capacity(spec.reps);
    for rep in 0..WARMUP_REPS + spec.reps {
        let started = Instant::now();
        let mut tape = Tape::new(Precision::F32);
        let binding = bind_params(&mut tape, &lm.params);
        let logits = lm_forward(
            &mut tape,
            &binding,
            &config,
            &ids,
            spec.bptt,
            spec.batch,
            &mut state,
            None,
        )?;
        let loss = tape.smoothed_cross_entropy(logits, &targets, 0.0)?;
        let grads = tape.backward(loss)?;
        let mut grads_only = grads;
        let mut grad_tensors: Vec<Tensor> = binding
            .ordered_vars()
            .iter()
            .map(|&v| grads_only.take(v).expect("parameter leaves always carry gradients"))
            .collect();
        clip_global_norm(&mut grad_tensors, 0.25);
        let mut owners = lm.params.trainable_mut();
        let mut param_refs: Vec<&mut Tensor> = owners.iter_mut().map(|(_, t)| &mut **t).collect();
        let grad_refs: Vec<&Tensor> = grad_tensors.iter().collect();
        adam_step(&mut param_refs, &grad_refs, &mut opt, 1e-3, 0.9, 0.01)?;
        if rep >= WARMUP_REPS {
            samples.push(started.elapsed().as_secs_f64() * 1e3);
        }
    }
    Ok(median(&samples))
}

/// Time every registered cell on the same configuration and report the
/// LSTM-to-QRNN ratio.
pub fn speed_benchmark(spec: &BenchSpec) -> Result<BenchReport, TrainError> {
    let mut rows = Vec::new();
    for cell in cell_names() {
        let per_batch_ms = time_cell(cell, spec)?;
        rows.push(BenchRow { cell: cell.to_string(), per_batch_ms });
    }
    let ms_of = |name: &str| rows.iter().find(|r| r.cell == name).map(|r| r.per_batch_ms);
    let speedup = match (ms_of("lstm"), ms_of("qrnn")) {
        (Some(lstm), Some(qrnn)) if qrnn > 0.0 => lstm / qrnn,
        _ => f64::NAN,
    };
    Ok(BenchReport { rows, speedup })
}
