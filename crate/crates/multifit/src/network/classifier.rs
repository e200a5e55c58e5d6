//! Text classifier: the language-model encoder, concat pooling over valid
//! time steps, and a two-layer head with batch normalization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::NetworkError;
use crate::tensor::Tensor;

use super::lm::{encoder_forward, DropoutPlan, LanguageModel};
use super::{bind_params, ModelConfig, Parameters, RecurrentState, TapeBinding};

/// Batch-norm running statistics update momentum.
pub const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

/// Classifier: shared encoder configuration plus encoder and head
/// parameters. The head reads the concat-pooled encoder output (three
/// segments of `emb_dim`).
#[derive(Clone, Debug)]
pub struct TextClassifier {
    pub config: ModelConfig,
    pub n_classes: usize,
    pub params: Parameters,
}

fn init_head(
    params: &mut Parameters,
    config: &ModelConfig,
    n_classes: usize,
    rng: &mut ChaCha8Rng,
) {
    let pooled = 3 * config.emb_dim;
    let hidden = config.clf_hidden;
    let b1 = 1.0 / (pooled as f64).sqrt();
    let b2 = 1.0 / (hidden as f64).sqrt();
    params.insert("head.fc1.weight", Tensor::uniform(vec![pooled, hidden], b1, rng));
    params.insert("head.fc1.bias", Tensor::zeros(vec![hidden]));
    params.insert("head.bn.gamma", Tensor::filled(vec![hidden], 1.0));
    params.insert("head.bn.beta", Tensor::zeros(vec![hidden]));
    params.insert("head.fc2.weight", Tensor::uniform(vec![hidden, n_classes], b2, rng));
    params.insert("head.fc2.bias", Tensor::zeros(vec![n_classes]));
    params.insert_buffer("head.bn.running_mean", Tensor::zeros(vec![hidden]));
    params.insert_buffer("head.bn.running_var", Tensor::filled(vec![hidden], 1.0));
}

/// Build a classifier from scratch (randomly initialized encoder).
pub fn build_classifier(
    config: &ModelConfig,
    n_classes: usize,
    seed: u64,
) -> Result<TextClassifier, NetworkError> {
    let lm = super::lm::build_language_model(config, seed)?;
    let mut params = lm.params;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    init_head(&mut params, config, n_classes, &mut rng);
    Ok(TextClassifier { config: config.clone(), n_classes, params })
}

/// Copy a trained language model's encoder into a fresh classifier. The
/// head is newly initialized; nothing is frozen. Configurations must
/// match exactly or the transfer is rejected listing the differing fields.
pub fn transfer_encoder(
    lm: &LanguageModel,
    target: &ModelConfig,
    n_classes: usize,
    head_seed: u64,
) -> Result<TextClassifier, NetworkError> {
    let mut mismatches = Vec::new();
    let a = &lm.config;
    if a.vocab_size != target.vocab_size {
        mismatches.push(format!("vocab_size: {} vs {}", a.vocab_size, target.vocab_size));
    }
    if a.emb_dim != target.emb_dim {
        mismatches.push(format!("emb_dim: {} vs {}", a.emb_dim, target.emb_dim));
    }
    if a.hidden_dim != target.hidden_dim {
        mismatches.push(format!("hidden_dim: {} vs {}", a.hidden_dim, target.hidden_dim));
    }
    if a.n_layers != target.n_layers {
        mismatches.push(format!("n_layers: {} vs {}", a.n_layers, target.n_layers));
    }
    if a.qrnn_widths != target.qrnn_widths {
        mismatches.push(format!("qrnn_widths: {:?} vs {:?}", a.qrnn_widths, target.qrnn_widths));
    }
    if a.cell != target.cell {
        mismatches.push(format!("cell: {} vs {}", a.cell, target.cell));
    }
    if !mismatches.is_empty() {
        return Err(NetworkError::TransferMismatch(mismatches));
    }
    let mut params = Parameters::new();
    for (name, tensor) in lm.params.iter() {
        if name != "decoder.bias" {
            params.insert(name, tensor.clone());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(head_seed);
    init_head(&mut params, target, n_classes, &mut rng);
    Ok(TextClassifier { config: target.clone(), n_classes, params })
}

/// Batch statistics produced by a training-mode forward; the caller folds
/// them into the running buffers via [`update_running_stats`].
pub struct BnBatch {
    pub mean: Tensor,
    pub var: Tensor,
}

/// Classifier forward over padded token ids `[T,B]` with per-example
/// valid lengths. Training mode (`dropout` present) uses batch statistics
/// in the head's batch-norm and returns them; evaluation mode uses the
/// frozen running statistics and returns `None`.
pub fn classifier_forward(
    tape: &mut Tape,
    binding: &TapeBinding,
    clf: &TextClassifier,
    ids: &[usize],
    t: usize,
    b: usize,
    lengths: &[usize],
    mut dropout: Option<&mut DropoutPlan<'_>>,
) -> Result<(Var, Option<BnBatch>), NetworkError> {
    let config = &clf.config;
    let mut state = RecurrentState::zeros(config, b);
    let h = encoder_forward(tape, binding, config, ids, t, b, &mut state, dropout.as_deref_mut())?;
    let pooled = tape.concat_pool(h, lengths)?;
    let fc1 = tape.matmul(pooled, binding.var("head.fc1.weight")?)?;
    let fc1 = tape.add_bias(fc1, binding.var("head.fc1.bias")?)?;
    let gamma = binding.var("head.bn.gamma")?;
    let beta = binding.var("head.bn.beta")?;
    let training = dropout.is_some();
    let (bn, batch_mean, batch_var) = if training {
        tape.batch_norm(fc1, gamma, beta, None, BN_EPS)?
    } else {
        let mean = clf.params.get("head.bn.running_mean")?;
        let var = clf.params.get("head.bn.running_var")?;
        tape.batch_norm(fc1, gamma, beta, Some((mean, var)), BN_EPS)?
    };
    let act = tape.relu(bn)?;
    let act = if let Some(plan) = dropout.as_deref_mut() {
        let rate = plan.rates.output;
        match super::lm::dropout_mask(plan.rng, vec![b, config.clf_hidden], rate) {
            Some(m) => {
                let mv = tape.leaf(m);
                tape.mul(act, mv)?
            }
            None => act,
        }
    } else {
        act
    };
    let logits = tape.matmul(act, binding.var("head.fc2.weight")?)?;
    let logits = tape.add_bias(logits, binding.var("head.fc2.bias")?)?;
    let stats = training.then(|| BnBatch { mean: batch_mean, var: batch_var });
    Ok((logits, stats))
}

/// Fold batch statistics into the running buffers with momentum 0.1.
pub fn update_running_stats(params: &mut Parameters, batch: &BnBatch) -> Result<(), NetworkError> {
    for (name, fresh) in
        [("head.bn.running_mean", &batch.mean), ("head.bn.running_var", &batch.var)]
    {
        let running = params.get_mut(name)?;
        for (r, &v) in running.data_mut().iter_mut().zip(fresh.data()) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
    Ok(())
}

/// Evaluation-mode class logits on a fresh tape.
pub fn classifier_eval_logits(
    clf: &TextClassifier,
    tape: &mut Tape,
    ids: &[usize],
    t: usize,
    b: usize,
    lengths: &[usize],
) -> Result<Var, NetworkError> {
    let binding = bind_params(tape, &clf.params);
    let (logits, _) = classifier_forward(tape, &binding, clf, ids, t, b, lengths, None)?;
    Ok(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Precision;
    use crate::gradcheck::check_gradients;
    use crate::network::lm::build_language_model;

    fn tiny_config() -> ModelConfig {
        ModelConfig::tiny(9, 3, 4, 2)
    }

    #[test]
    fn logits_have_batch_by_class_shape() {
        let clf = build_classifier(&tiny_config(), 4, 5).unwrap();
        let mut tape = Tape::new(Precision::F64);
        let ids = [1usize, 2, 3, 4, 5, 6]; // [T=2, B=3]
        let logits =
            classifier_eval_logits(&clf, &mut tape, &ids, 2, 3, &[2, 2, 1]).unwrap();
        assert_eq!(tape.value(logits).shape(), &[3, 4]);
    }

    #[test]
    fn zero_final_layer_gives_uniform_class_probabilities() {
        let mut clf = build_classifier(&tiny_config(), 4, 5).unwrap();
        clf.params.get_mut("head.fc2.weight").unwrap().data_mut().fill(0.0);
        clf.params.get_mut("head.fc2.bias").unwrap().data_mut().fill(0.0);
        let mut tape = Tape::new(Precision::F64);
        let logits = classifier_eval_logits(&clf, &mut tape, &[1, 2], 2, 1, &[2]).unwrap();
        let row = tape.value(logits).data();
        assert!(row.iter().all(|&v| v == 0.0), "zero weights must give zero logits");
    }

    #[test]
    fn transferred_encoder_reproduces_lm_hidden_states() {
        let config = tiny_config();
        let lm = build_language_model(&config, 31).unwrap();
        let clf = transfer_encoder(&lm, &config, 3, 77).unwrap();
        let ids = [2usize, 4, 6, 8];
        let from_lm = {
            let mut tape = Tape::new(Precision::F64);
            let binding = bind_params(&mut tape, &lm.params);
            let mut state = RecurrentState::zeros(&config, 1);
            let h = encoder_forward(&mut tape, &binding, &config, &ids, 4, 1, &mut state, None)
                .unwrap();
            tape.value(h).clone()
        };
        let from_clf = {
            let mut tape = Tape::new(Precision::F64);
            let binding = bind_params(&mut tape, &clf.params);
            let mut state = RecurrentState::zeros(&config, 1);
            let h = encoder_forward(&mut tape, &binding, &config, &ids, 4, 1, &mut state, None)
                .unwrap();
            tape.value(h).clone()
        };
        assert_eq!(from_lm.data(), from_clf.data(), "transfer must copy encoder weights");
    }

    #[test]
    fn transfer_rejects_mismatched_configs_listing_fields() {
        let config = tiny_config();
        let lm = build_language_model(&config, 31).unwrap();
        let mut other = config.clone();
        other.hidden_dim += 1;
        other.cell = "lstm".to_string();
        match transfer_encoder(&lm, &other, 3, 0) {
            Err(NetworkError::TransferMismatch(fields)) => {
                assert_eq!(fields.len(), 2);
                assert!(fields[0].starts_with("hidden_dim"));
                assert!(fields[1].starts_with("cell"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fresh_head_differs_between_transfers_with_different_seeds() {
        let config = tiny_config();
        let lm = build_language_model(&config, 31).unwrap();
        let a = transfer_encoder(&lm, &config, 3, 1).unwrap();
        let b = transfer_encoder(&lm, &config, 3, 2).unwrap();
        let wa = a.params.get("head.fc1.weight").unwrap();
        let wb = b.params.get("head.fc1.weight").unwrap();
        assert!(wa.max_abs_diff(wb) > 0.0, "head must be freshly initialized");
    }

    #[test]
    fn running_stats_follow_batch_statistics() {
        let mut params = Parameters::new();
        params.insert_buffer("head.bn.running_mean", Tensor::zeros(vec![2]));
        params.insert_buffer("head.bn.running_var", Tensor::filled(vec![2], 1.0));
        let batch = BnBatch {
            mean: Tensor::new(vec![2], vec![1.0, -1.0]).unwrap(),
            var: Tensor::new(vec![2], vec![4.0, 9.0]).unwrap(),
        };
        update_running_stats(&mut params, &batch).unwrap();
        let mean = params.get("head.bn.running_mean").unwrap();
        let var = params.get("head.bn.running_var").unwrap();
        assert_eq!(mean.data(), &[0.1, -0.1]);
        assert_eq!(var.data(), &[0.9 * 1.0 + 0.1 * 4.0, 0.9 * 1.0 + 0.1 * 9.0]);
    }

    #[test]
    fn head_gradients_pass_finite_difference_check() {
        let config = tiny_config();
        let mut clf = build_classifier(&config, 3, 13).unwrap();
        // The randomly initialized encoder produces tiny head inputs, which
        // leaves ReLU pre-activations within the finite-difference step of
        // the kink. Shift them decisively to either side and give the
        // batch-norm parameters non-identity values so their gradients are
        // exercised meaningfully.
        for (j, v) in clf.params.get_mut("head.fc1.bias").unwrap().data_mut().iter_mut().enumerate() {
            *v = 0.2 + 0.1 * j as f64 * if j % 2 == 0 { 1.0 } else { -1.0 };
        }
        for (j, v) in clf.params.get_mut("head.bn.gamma").unwrap().data_mut().iter_mut().enumerate() {
            *v = 0.8 + 0.05 * j as f64;
        }
        for (j, v) in clf.params.get_mut("head.bn.beta").unwrap().data_mut().iter_mut().enumerate() {
            *v = -0.1 + 0.04 * j as f64;
        }
        for (j, v) in
            clf.params.get_mut("head.bn.running_mean").unwrap().data_mut().iter_mut().enumerate()
        {
            *v = 0.01 * j as f64;
        }
        for (j, v) in
            clf.params.get_mut("head.bn.running_var").unwrap().data_mut().iter_mut().enumerate()
        {
            *v = 1.0 + 0.1 * j as f64;
        }
        let ids = [1usize, 2, 3, 4, 5, 6, 7, 8];
        let lengths = [4usize, 3];
        let targets = [0usize, 2];
        let names = clf.params.trainable_names();
        let initial: Vec<Tensor> = clf.params.trainable().map(|(_, t)| t.clone()).collect();
        let clf2 = clf.clone();
        let report = check_gradients(
            &names.iter().map(|s| s.as_str()).collect::<Vec<_>>(),
            &initial,
            1e-5,
            &|tape, values| {
                let mut vars = indexmap::IndexMap::new();
                for (name, value) in names.iter().zip(values) {
                    vars.insert(name.clone(), tape.param(value.clone()));
                }
                let binding = TapeBinding { vars };
                // Evaluation-mode batch norm keeps the loss a deterministic
                // function of the parameters (batch statistics would add a
                // dependency the numeric probe sees too — both modes are
                // differentiable; frozen is simpler to reason about).
                let (logits, _) = classifier_forward(
                    tape, &binding, &clf2, &ids, 4, 2, &lengths, None,
                )
                .map_err(|e| match e {
                    NetworkError::Numerics(n) => n,
                    other => crate::error::NumericsError::InvalidConfig { what: other.to_string() },
                })?;
                tape.smoothed_cross_entropy(logits, &targets, 0.1)
            },
        )
        .unwrap();
        assert!(
            report.max_rel_err() < 1e-6,
            "worst analytic/numeric disagreement: {:?}",
            report.entries.first()
        );
    }

    #[test]
    fn one_training_step_moves_encoder_weights() {
        use crate::optim::{adam_step, clip_global_norm, OptimizerState};
        let config = tiny_config();
        let lm = build_language_model(&config, 31).unwrap();
        let mut clf = transfer_encoder(&lm, &config, 3, 77).unwrap();
        let before = clf.params.get("layer0.z.weight").unwrap().clone();

        let mut tape = Tape::new(Precision::F64);
        let binding = bind_params(&mut tape, &clf.params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut plan = DropoutPlan { rates: config.dropout.scaled(0.0), rng: &mut rng };
        let ids = [1usize, 2, 3, 4];
        let (logits, stats) = classifier_forward(
            &mut tape, &binding, &clf, &ids, 2, 2, &[2, 2], Some(&mut plan),
        )
        .unwrap();
        let loss = tape.smoothed_cross_entropy(logits, &[0, 1], 0.1).unwrap();
        let grads = tape.backward(loss).unwrap();

        let order = binding.ordered_vars();
        let grad_tensors: Vec<&Tensor> = order.iter().map(|&v| grads.of(v).unwrap()).collect();
        let mut grad_owned: Vec<Tensor> = grad_tensors.into_iter().cloned().collect();
        clip_global_norm(&mut grad_owned, 0.25);
        let mut state = OptimizerState::new(grad_owned.len());
        let mut holders = clf.params.trainable_mut();
        let mut params_mut: Vec<&mut Tensor> =
            holders.iter_mut().map(|(_, t)| &mut **t).collect();
        let grad_refs: Vec<&Tensor> = grad_owned.iter().collect();
        adam_step(&mut params_mut, &grad_refs, &mut state, 1e-2, 0.9, 0.0).unwrap();
        drop(holders);
        if let Some(batch) = stats {
            update_running_stats(&mut clf.params, &batch).unwrap();
        }
        let after = clf.params.get("layer0.z.weight").unwrap();
        assert!(
            before.max_abs_diff(after) > 0.0,
            "encoder silently frozen after transfer"
        );
    }
}

