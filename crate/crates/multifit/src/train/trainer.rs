//! The staged training loops: language-model pretraining, target-domain
//! language-model fine-tuning, and classifier fine-tuning.
//!
//! All three stages share the same machinery: a fresh tape per step at
//! 32-bit precision, cross-entropy (label-smoothed for the classifier),
//! global-norm gradient clipping, Adam with decoupled weight decay driven
//! by the one-cycle schedule (cyclical momentum as Adam's beta1), and
//! per-parameter learning rates for discriminative fine-tuning. Every
//! source of randomness derives from the run seed, so a repeated run
//! reproduces losses bitwise.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Precision, Tape};
use crate::error::TrainError;
use crate::network::{
    bind_params, build_language_model, classifier::classifier_eval_logits,
    classifier::update_running_stats, classifier_forward, lm_forward, n_param_groups, param_group,
    transfer_encoder, DropoutPlan, LanguageModel, ModelConfig, RecurrentState, TextClassifier,
};
use crate::optim::{adam_step_lrs, clip_global_norm, OptimizerState};
use crate::tensor::{argmax_rows, Tensor};
use crate::tokenizer::TokenizerModel;
use crate::train::data::{bptt_batchify, LabeledDataset};
use crate::train::loss::label_smoothed_loss;
use crate::train::schedule::{discriminative_lr_groups, one_cycle_cosine, ScheduleConfig};

/// Dropout multiplier per stage: pretraining runs dry, LM fine-tuning and
/// classifier fine-tuning scale the base rates up progressively.
pub const PRETRAIN_DROPOUT_MULTIPLIER: f64 = 0.0;
pub const FINETUNE_DROPOUT_MULTIPLIER: f64 = 0.3;
pub const CLASSIFIER_DROPOUT_MULTIPLIER: f64 = 0.5;

/// Hyperparameters shared by the training stages.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Truncated-backpropagation window length.
    pub bptt: usize,
    /// Batch size (parallel strips) for the language-model stages.
    pub lm_batch: usize,
    /// Batch size for classifier fine-tuning.
    pub clf_batch: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub clf_epochs: usize,
    /// Peak learning rate of the one-cycle schedule.
    pub lr_max: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    /// Label smoothing for the classifier loss (LM stages use 0).
    pub label_smooth_eps: f64,
    /// Geometric ratio between adjacent depth groups' learning rates.
    pub disc_factor: f64,
    pub pct_warmup: f64,
    pub div_start: f64,
    pub div_final: f64,
    pub mom_max: f64,
    pub mom_min: f64,
    /// Fraction of corpus lines held out as the LM validation split.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            bptt: 70,
            lm_batch: 50,
            clf_batch: 18,
            pretrain_epochs: 10,
            finetune_epochs: 20,
            clf_epochs: 8,
            lr_max: 3e-3,
            weight_decay: 0.01,
            clip_norm: 0.25,
            label_smooth_eps: 0.1,
            disc_factor: 2.6,
            pct_warmup: 0.1,
            div_start: 25.0,
            div_final: 1e4,
            mom_max: 0.95,
            mom_min: 0.85,
            val_fraction: 0.05,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self, total_steps: usize) -> ScheduleConfig {
        ScheduleConfig {
            total_steps,
            lr_max: self.lr_max,
            pct_warmup: self.pct_warmup,
            div_start: self.div_start,
            div_final: self.div_final,
            mom_max: self.mom_max,
            mom_min: self.mom_min,
        }
    }
}

/// One progress line; LM stages fill `perplexity`, classifier stages fill
/// `accuracy` on the validation split.
#[derive(Clone, Debug)]
pub struct MetricRecord {
    pub stage: &'static str,
    pub epoch: usize,
    pub step: usize,
    pub split: &'static str,
    pub loss: f64,
    pub perplexity: Option<f64>,
    pub accuracy: Option<f64>,
    pub lr: f64,
    pub momentum: f64,
    pub wallclock_ms: u128,
}

/// Receives progress records as training runs.
pub trait TrainObserver {
    fn record(&mut self, record: &MetricRecord);
}

/// Discards every record.
pub struct NullObserver;

impl TrainObserver for NullObserver {
    fn record(&mut self, _: &MetricRecord) {}
}

/// Keeps every record in memory (test and report plumbing).
#[derive(Default)]
pub struct MemoryObserver {
    pub records: Vec<MetricRecord>,
}

impl TrainObserver for MemoryObserver {
    fn record(&mut self, record: &MetricRecord) {
        self.records.push(record.clone());
    }
}

#[derive(Clone, Debug)]
pub struct LmEpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_ppl: f64,
    pub val_loss: f64,
    pub val_ppl: f64,
}

#[derive(Clone, Debug)]
pub struct LmStageReport {
    pub stage: &'static str,
    pub epochs: Vec<LmEpochMetrics>,
    /// Tokens the batch layout could not use (stream remainder).
    pub dropped_tokens: usize,
    pub final_train_loss: f64,
}

#[derive(Clone, Debug)]
pub struct ClfEpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct ClassifierReport {
    pub epochs: Vec<ClfEpochMetrics>,
    /// Epoch whose snapshot was returned; `None` when no epochs ran.
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: f64,
    pub final_val_accuracy: f64,
}

/// Fan one user seed out into independent, reproducible streams keyed by a
/// tag string (FNV-1a of the tag).
pub(crate) fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in tag.bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    seed ^ h
}

/// Per-stage random stream derived from the run seed and the stage name.
fn stage_rng(seed: u64, stage: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stage))
}

/// Segment each line and append the end-of-sequence id, concatenating
/// everything into one token stream.
pub fn corpus_to_stream(tokenizer: &TokenizerModel, lines: &[&str]) -> Vec<usize> {
    let mut stream = Vec::new();
    for line in lines {
        let seg = tokenizer.segment(line);
        stream.extend_from_slice(&seg.ids);
        stream.push(tokenizer.eos);
    }
    stream
}

/// Hold out the final `val_fraction` of non-blank lines (at least one) for
/// validation. A single-line corpus validates on its only line.
pub fn split_validation_lines(corpus: &[String], val_fraction: f64) -> (Vec<&str>, Vec<&str>) {
    let lines: Vec<&str> =
        corpus.iter().map(|s| s.as_str()).filter(|s| !s.trim().is_empty()).collect();
    if lines.len() < 2 {
        return (lines.clone(), lines);
    }
    let n_val = (((lines.len() as f64) * val_fraction).floor() as usize).clamp(1, lines.len() - 1);
    let cut = lines.len() - n_val;
    (lines[..cut].to_vec(), lines[cut..].to_vec())
}

/// Mean per-token cross entropy of the model over a stream, evaluated with
/// the recurrent state carried across the whole stream (batch 1, windows of
/// `bptt`). Returns `(mean loss, tokens scored)`.
pub fn lm_stream_loss(
    model: &LanguageModel,
    stream: &[usize],
    bptt: usize,
) -> Result<(f64, usize), TrainError> {
    let batches = bptt_batchify(stream, 1, bptt)?;
    let mut state = RecurrentState::zeros(&model.config, 1);
    let mut loss_sum = 0.0;
    let mut tokens = 0usize;
    for w in &batches.windows {
        let mut tape = Tape::new(Precision::F32);
        let binding = bind_params(&mut tape, &model.params);
        let logits =
            lm_forward(&mut tape, &binding, &model.config, &w.input, w.seq_len, 1, &mut state, None)?;
        let loss = tape.smoothed_cross_entropy(logits, &w.target, 0.0)?;
        loss_sum += tape.value(loss).item() * w.seq_len as f64;
        tokens += w.seq_len;
    }
    Ok((loss_sum / tokens as f64, tokens))
}

/// Learning rate per trainable parameter: uniform, or geometrically
/// decreasing with depth group when `discriminative` is set.
fn per_param_lrs(
    lr: f64,
    discriminative: bool,
    factor: f64,
    groups: &[usize],
    n_groups: usize,
) -> Vec<f64> {
    if !discriminative {
        return vec![lr; groups.len()];
    }
    let group_lrs = discriminative_lr_groups(lr, n_groups, factor);
    groups.iter().map(|&g| group_lrs[g]).collect()
}

/// Language-model training shared by pretraining and fine-tuning: one-cycle
/// schedule over `windows * epochs` steps, state persisting across windows
/// within an epoch and reset at epoch boundaries, validation after each
/// epoch on a held-out stream.
#[allow(clippy::too_many_arguments)]
fn run_lm_stage(
    model: &mut LanguageModel,
    train_stream: &[usize],
    val_stream: &[usize],
    cfg: &TrainConfig,
    stage: &'static str,
    epochs: usize,
    dropout_multiplier: f64,
    discriminative: bool,
    observer: &mut dyn TrainObserver,
) -> Result<LmStageReport, TrainError> {
    let started = Instant::now();
    let batches = bptt_batchify(train_stream, cfg.lm_batch, cfg.bptt)?;
    let total_steps = (batches.windows.len() * epochs).max(1);
    let schedule = cfg.schedule(total_steps);
    let names = model.params.trainable_names();
    let groups: Vec<usize> =
        names.iter().map(|n| param_group(n, model.config.n_layers)).collect();
    let n_groups = n_param_groups(model.config.n_layers);
    let mut opt = OptimizerState::new(names.len());
    let mut rng = stage_rng(cfg.seed, stage);
    let rates = model.config.dropout.scaled(dropout_multiplier);

    let mut report = LmStageReport {
        stage,
        epochs: Vec::new(),
        dropped_tokens: batches.dropped_tokens,
        final_train_loss: f64::NAN,
    };
    let mut step = 0usize;
    for epoch in 1..=epochs {
        let mut state = RecurrentState::zeros(&model.config, cfg.lm_batch);
        let mut loss_sum = 0.0;
        let mut token_sum = 0usize;
        let mut last_lr = 0.0;
        let mut last_mom = cfg.mom_max;
        for w in &batches.windows {
            let (lr, mom) = one_cycle_cosine(step, &schedule)?;
            let mut tape = Tape::new(Precision::F32);
            let binding = bind_params(&mut tape, &model.params);
            let mut plan = DropoutPlan { rates, rng: &mut rng };
            let logits = lm_forward(
                &mut tape,
                &binding,
                &model.config,
                &w.input,
                w.seq_len,
                w.batch,
                &mut state,
                Some(&mut plan),
            )?;
            let loss = tape.smoothed_cross_entropy(logits, &w.target, 0.0)?;
            let loss_value = tape.value(loss).item();
            let mut grads = tape.backward(loss)?;
            let vars = binding.ordered_vars();
            let mut grad_tensors: Vec<Tensor> = vars
                .iter()
                .map(|&v| grads.take(v).expect("parameter leaves always carry gradients"))
                .collect();
            clip_global_norm(&mut grad_tensors, cfg.clip_norm);
            let lrs = per_param_lrs(lr, discriminative, cfg.disc_factor, &groups, n_groups);
            let mut owners = model.params.trainable_mut();
            let mut param_refs: Vec<&mut Tensor> =
                owners.iter_mut().map(|(_, t)| &mut **t).collect();
            let grad_refs: Vec<&Tensor> = grad_tensors.iter().collect();
            adam_step_lrs(&mut param_refs, &grad_refs, &mut opt, &lrs, mom, cfg.weight_decay)?;
            step += 1;
            let tokens = w.seq_len * w.batch;
            loss_sum += loss_value * tokens as f64;
            token_sum += tokens;
            (last_lr, last_mom) = (lr, mom);
        }
        let train_loss = loss_sum / token_sum.max(1) as f64;
        let (val_loss, _) = lm_stream_loss(model, val_stream, cfg.bptt)?;
        let metrics = LmEpochMetrics {
            epoch,
            train_loss,
            train_ppl: train_loss.exp(),
            val_loss,
            val_ppl: val_loss.exp(),
        };
        let elapsed = started.elapsed().as_millis();
        observer.record(&MetricRecord {
            stage,
            epoch,
            step,
            split: "train",
            loss: train_loss,
            perplexity: Some(metrics.train_ppl),
            accuracy: None,
            lr: last_lr,
            momentum: last_mom,
            wallclock_ms: elapsed,
        });
        observer.record(&MetricRecord {
            stage,
            epoch,
            step,
            split: "valid",
            loss: val_loss,
            perplexity: Some(metrics.val_ppl),
            accuracy: None,
            lr: last_lr,
            momentum: last_mom,
            wallclock_ms: started.elapsed().as_millis(),
        });
        report.final_train_loss = train_loss;
        report.epochs.push(metrics);
    }
    Ok(report)
}

/// Stage one: train a fresh language model on a general-domain corpus with
/// dropout off. The model's vocabulary is taken from the tokenizer.
pub fn pretrain_lm(
    corpus: &[String],
    tokenizer: &TokenizerModel,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(LanguageModel, LmStageReport), TrainError> {
    let (train_lines, val_lines) = split_validation_lines(corpus, cfg.val_fraction);
    if train_lines.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let train_stream = corpus_to_stream(tokenizer, &train_lines);
    let val_stream = corpus_to_stream(tokenizer, &val_lines);
    let mut effective = model_cfg.clone();
    effective.vocab_size = tokenizer.vocab_size();
    let mut model = build_language_model(&effective, cfg.seed)?;
    let report = run_lm_stage(
        &mut model,
        &train_stream,
        &val_stream,
        cfg,
        "pretrain",
        cfg.pretrain_epochs,
        PRETRAIN_DROPOUT_MULTIPLIER,
        false,
        observer,
    )?;
    Ok((model, report))
}

/// Stage two: continue language-model training on the target-domain corpus
/// with moderate dropout and discriminative learning rates.
pub fn finetune_lm(
    model: &mut LanguageModel,
    corpus: &[String],
    tokenizer: &TokenizerModel,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<LmStageReport, TrainError> {
    if model.config.vocab_size != tokenizer.vocab_size() {
        return Err(TrainError::VocabMismatch {
            checkpoint: model.config.vocab_size,
            tokenizer: tokenizer.vocab_size(),
        });
    }
    let (train_lines, val_lines) = split_validation_lines(corpus, cfg.val_fraction);
    if train_lines.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let train_stream = corpus_to_stream(tokenizer, &train_lines);
    let val_stream = corpus_to_stream(tokenizer, &val_lines);
    run_lm_stage(
        model,
        &train_stream,
        &val_stream,
        cfg,
        "lm-finetune",
        cfg.finetune_epochs,
        FINETUNE_DROPOUT_MULTIPLIER,
        true,
        observer,
    )
}

/// Segment every example and append the end-of-sequence id.
fn encode_examples(tokenizer: &TokenizerModel, texts: &[String]) -> Vec<Vec<usize>> {
    texts
        .iter()
        .map(|text| {
            let mut ids = tokenizer.segment(text).ids;
            ids.push(tokenizer.eos);
            ids
        })
        .collect()
}

/// Gather `chunk` examples into a `[T,B]` id block padded to the longest
/// example; `lengths` count only real tokens.
fn pad_batch(
    encoded: &[Vec<usize>],
    chunk: &[usize],
    pad: usize,
) -> (Vec<usize>, usize, usize, Vec<usize>) {
    let b = chunk.len();
    let lengths: Vec<usize> = chunk.iter().map(|&i| encoded[i].len()).collect();
    let t = lengths.iter().copied().max().unwrap_or(1);
    let mut ids = vec![pad; t * b];
    for (col, &example) in chunk.iter().enumerate() {
        for (row, &token) in encoded[example].iter().enumerate() {
            ids[row * b + col] = token;
        }
    }
    (ids, t, b, lengths)
}

fn eval_accuracy(
    clf: &TextClassifier,
    encoded: &[Vec<usize>],
    labels: &[usize],
    pad: usize,
    batch: usize,
) -> Result<f64, TrainError> {
    let indices: Vec<usize> = (0..encoded.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(batch.max(1)) {
        let (ids, t, b, lengths) = pad_batch(encoded, chunk, pad);
        let mut tape = Tape::new(Precision::F32);
        let logits = classifier_eval_logits(clf, &mut tape, &ids, t, b, &lengths)?;
        let preds = argmax_rows(tape.value(logits));
        for (&example, &pred) in chunk.iter().zip(&preds) {
            if pred == labels[example] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / encoded.len() as f64)
}

/// Fraction of `data` the classifier labels correctly (evaluation mode).
pub fn classifier_accuracy(
    clf: &TextClassifier,
    tokenizer: &TokenizerModel,
    data: &LabeledDataset,
    batch: usize,
) -> Result<f64, TrainError> {
    let encoded = encode_examples(tokenizer, &data.texts);
    eval_accuracy(clf, &encoded, &data.labels, tokenizer.pad, batch)
}

/// The classifier training loop shared by supervised fine-tuning and
/// pseudo-label bootstrapping: shuffled mini-batches, label-smoothed loss,
/// heavy dropout, one-cycle schedule with discriminative learning rates,
/// batch-norm running statistics folded in per step, and snapshot selection
/// by validation accuracy.
pub(crate) fn train_classifier_loop(
    clf: &mut TextClassifier,
    tokenizer: &TokenizerModel,
    train: &LabeledDataset,
    valid: &LabeledDataset,
    cfg: &TrainConfig,
    stage: &'static str,
    observer: &mut dyn TrainObserver,
) -> Result<ClassifierReport, TrainError> {
    let started = Instant::now();
    let train_encoded = encode_examples(tokenizer, &train.texts);
    let valid_encoded = encode_examples(tokenizer, &valid.texts);
    let pad = tokenizer.pad;
    let n = train.len();
    let batches_per_epoch = n.div_ceil(cfg.clf_batch.max(1));
    let total_steps = (batches_per_epoch * cfg.clf_epochs).max(1);
    let schedule = cfg.schedule(total_steps);
    let names = clf.params.trainable_names();
    let groups: Vec<usize> = names.iter().map(|nm| param_group(nm, clf.config.n_layers)).collect();
    let n_groups = n_param_groups(clf.config.n_layers);
    let mut opt = OptimizerState::new(names.len());
    let mut rng = stage_rng(cfg.seed, stage);
    let rates = clf.config.dropout.scaled(CLASSIFIER_DROPOUT_MULTIPLIER);

    let mut report = ClassifierReport {
        epochs: Vec::new(),
        best_epoch: None,
        best_val_accuracy: f64::NAN,
        final_val_accuracy: f64::NAN,
    };
    let mut best: Option<(f64, usize, TextClassifier)> = None;
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    for epoch in 1..=cfg.clf_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut last_lr = 0.0;
        let mut last_mom = cfg.mom_max;
        for chunk in order.chunks(cfg.clf_batch.max(1)) {
            let (ids, t, b, lengths) = pad_batch(&train_encoded, chunk, pad);
            let targets: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let (lr, mom) = one_cycle_cosine(step, &schedule)?;
            let mut tape = Tape::new(Precision::F32);
            let binding = bind_params(&mut tape, &clf.params);
            let mut plan = DropoutPlan { rates, rng: &mut rng };
            let (logits, stats) = classifier_forward(
                &mut tape,
                &binding,
                clf,
                &ids,
                t,
                b,
                &lengths,
                Some(&mut plan),
            )?;
            let loss = label_smoothed_loss(&mut tape, logits, &targets, cfg.label_smooth_eps)?;
            let loss_value = tape.value(loss).item();
            let mut grads = tape.backward(loss)?;
            let vars = binding.ordered_vars();
            let mut grad_tensors: Vec<Tensor> = vars
                .iter()
                .map(|&v| grads.take(v).expect("parameter leaves always carry gradients"))
                .collect();
            clip_global_norm(&mut grad_tensors, cfg.clip_norm);
            let lrs = per_param_lrs(lr, true, cfg.disc_factor, &groups, n_groups);
            let mut owners = clf.params.trainable_mut();
            let mut param_refs: Vec<&mut Tensor> =
                owners.iter_mut().map(|(_, tns)| &mut **tns).collect();
            let grad_refs: Vec<&Tensor> = grad_tensors.iter().collect();
            adam_step_lrs(&mut param_refs, &grad_refs, &mut opt, &lrs, mom, cfg.weight_decay)?;
            if let Some(stats) = stats {
                update_running_stats(&mut clf.params, &stats)?;
            }
            step += 1;
            loss_sum += loss_value * b as f64;
            seen += b;
            (last_lr, last_mom) = (lr, mom);
        }
        let train_loss = loss_sum / seen.max(1) as f64;
        let val_accuracy =
            eval_accuracy(clf, &valid_encoded, &valid.labels, pad, cfg.clf_batch)?;
        if best.as_ref().map_or(true, |(acc, _, _)| val_accuracy > *acc) {
            best = Some((val_accuracy, epoch, clf.clone()));
        }
        observer.record(&MetricRecord {
            stage,
            epoch,
            step,
            split: "train",
            loss: train_loss,
            perplexity: None,
            accuracy: None,
            lr: last_lr,
            momentum: last_mom,
            wallclock_ms: started.elapsed().as_millis(),
        });
        observer.record(&MetricRecord {
            stage,
            epoch,
            step,
            split: "valid",
            loss: train_loss,
            perplexity: None,
            accuracy: Some(val_accuracy),
            lr: last_lr,
            momentum: last_mom,
            wallclock_ms: started.elapsed().as_millis(),
        });
        report.epochs.push(ClfEpochMetrics { epoch, train_loss, val_accuracy });
    }
    match best {
        Some((accuracy, epoch, snapshot)) => {
            report.final_val_accuracy = report.epochs.last().map_or(accuracy, |e| e.val_accuracy);
            report.best_val_accuracy = accuracy;
            report.best_epoch = Some(epoch);
            *clf = snapshot;
        }
        None => {
            // Zero epochs requested: the transferred model goes back
            // untouched; score it once so the report is still meaningful.
            let accuracy = eval_accuracy(clf, &valid_encoded, &valid.labels, pad, cfg.clf_batch)?;
            report.best_val_accuracy = accuracy;
            report.final_val_accuracy = accuracy;
        }
    }
    Ok(report)
}

/// Stage three: transfer the fine-tuned language model's encoder into a
/// classifier and train it on labeled data, returning the snapshot with the
/// best validation accuracy.
pub fn finetune_classifier(
    lm: &LanguageModel,
    tokenizer: &TokenizerModel,
    train: &LabeledDataset,
    valid: &LabeledDataset,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(TextClassifier, ClassifierReport), TrainError> {
    if lm.config.vocab_size != tokenizer.vocab_size() {
        return Err(TrainError::VocabMismatch {
            checkpoint: lm.config.vocab_size,
            tokenizer: tokenizer.vocab_size(),
        });
    }
    let n_classes = train.n_classes.max(valid.n_classes);
    let mut clf = transfer_encoder(lm, &lm.config, n_classes, cfg.seed)?;
    let report =
        train_classifier_loop(&mut clf, tokenizer, train, valid, cfg, "classifier", observer)?;
    Ok((clf, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{strategy, TrainOptions};

    fn patterned_corpus(lines: usize) -> Vec<String> {
        let patterns = [
            "the cat sat on the mat",
            "the dog ran in the park",
            "a bird flew over the tree",
        ];
        (0..lines).map(|i| patterns[i % patterns.len()].to_string()).collect()
    }

    fn word_tokenizer(corpus: &[String]) -> TokenizerModel {
        let opts = TrainOptions { target_vocab: 64, ..Default::default() };
        strategy("word").unwrap().train(corpus, &opts).unwrap()
    }

    fn tiny_model_cfg(vocab: usize) -> ModelConfig {
        ModelConfig::tiny(vocab, 8, 12, 2)
    }

    fn tiny_train_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            bptt: 8,
            lm_batch: 4,
            clf_batch: 6,
            pretrain_epochs: 3,
            finetune_epochs: 2,
            clf_epochs: 5,
            lr_max: 3e-3,
            val_fraction: 0.1,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn pretraining_reduces_training_loss_across_epochs() {
        let corpus = patterned_corpus(30);
        let tok = word_tokenizer(&corpus);
        let mut obs = MemoryObserver::default();
        let (model, report) =
            pretrain_lm(&corpus, &tok, &tiny_model_cfg(0), &tiny_train_cfg(7), &mut obs).unwrap();
        assert_eq!(model.config.vocab_size, tok.vocab_size());
        assert_eq!(report.epochs.len(), 3);
        let first = &report.epochs[0];
        let last = report.epochs.last().unwrap();
        assert!(
            last.train_loss < first.train_loss,
            "training loss should fall: {} -> {}",
            first.train_loss,
            last.train_loss
        );
        // Perplexity is exp(loss), and the observer stream is internally
        // consistent with non-decreasing wallclock.
        for e in &report.epochs {
            assert!((e.train_ppl - e.train_loss.exp()).abs() < 1e-12);
            assert!((e.val_ppl - e.val_loss.exp()).abs() < 1e-12);
        }
        assert_eq!(obs.records.len(), 6);
        for pair in obs.records.windows(2) {
            assert!(pair[1].wallclock_ms >= pair[0].wallclock_ms);
        }
        let train_records: Vec<_> =
            obs.records.iter().filter(|r| r.split == "train").collect();
        for (rec, e) in train_records.iter().zip(&report.epochs) {
            assert_eq!(rec.loss, e.train_loss);
            assert_eq!(rec.perplexity.unwrap(), e.train_ppl);
        }
    }

    #[test]
    fn same_seed_pretraining_runs_are_bitwise_identical() {
        let corpus = patterned_corpus(18);
        let tok = word_tokenizer(&corpus);
        let cfg = TrainConfig { pretrain_epochs: 2, ..tiny_train_cfg(11) };
        let (m1, r1) =
            pretrain_lm(&corpus, &tok, &tiny_model_cfg(0), &cfg, &mut NullObserver).unwrap();
        let (m2, r2) =
            pretrain_lm(&corpus, &tok, &tiny_model_cfg(0), &cfg, &mut NullObserver).unwrap();
        assert_eq!(r1.final_train_loss.to_bits(), r2.final_train_loss.to_bits());
        for (name, t1) in m1.params.iter() {
            let t2 = m2.params.get(name).unwrap();
            assert_eq!(t1.data(), t2.data(), "parameter {name} diverged between identical runs");
        }
        let cfg_other = TrainConfig { seed: 12, ..cfg };
        let (_, r3) =
            pretrain_lm(&corpus, &tok, &tiny_model_cfg(0), &cfg_other, &mut NullObserver).unwrap();
        assert_ne!(r1.final_train_loss.to_bits(), r3.final_train_loss.to_bits());
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let corpus = vec!["   ".to_string(), String::new()];
        let tok = word_tokenizer(&["word".to_string()]);
        let err =
            pretrain_lm(&corpus, &tok, &tiny_model_cfg(0), &tiny_train_cfg(1), &mut NullObserver)
                .err()
                .unwrap();
        assert!(matches!(err, TrainError::EmptyDataset));
    }

    #[test]
    fn finetuning_rejects_vocabulary_mismatch() {
        let corpus = patterned_corpus(12);
        let tok = word_tokenizer(&corpus);
        let mut model = build_language_model(&tiny_model_cfg(99), 3).unwrap();
        let err = finetune_lm(&mut model, &corpus, &tok, &tiny_train_cfg(3), &mut NullObserver)
            .err()
            .unwrap();
        match err {
            TrainError::VocabMismatch { checkpoint, tokenizer } => {
                assert_eq!(checkpoint, 99);
                assert_eq!(tokenizer, tok.vocab_size());
            }
            other => panic!("expected VocabMismatch, got {other:?}"),
        }
    }

    #[test]
    fn self_finetuning_keeps_validation_perplexity_within_five_percent() {
        let corpus = patterned_corpus(30);
        let tok = word_tokenizer(&corpus);
        let cfg = tiny_train_cfg(5);
        let (mut model, pre_report) =
            pretrain_lm(&corpus, &tok, &tiny_model_cfg(0), &cfg, &mut NullObserver).unwrap();
        let pre_ppl = pre_report.epochs.last().unwrap().val_ppl;
        let post_report =
            finetune_lm(&mut model, &corpus, &tok, &cfg, &mut NullObserver).unwrap();
        let post_ppl = post_report.epochs.last().unwrap().val_ppl;
        assert!(
            post_ppl <= pre_ppl * 1.05,
            "fine-tuning on the pretraining corpus should not hurt: {pre_ppl} -> {post_ppl}"
        );
    }

    fn keyword_dataset(n: usize, seed: u64) -> LabeledDataset {
        use rand::Rng;
        let fillers = ["one", "two", "three", "four", "five"];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut texts = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % 2;
            let mut words: Vec<&str> =
                (0..4).map(|_| fillers[rng.gen_range(0..fillers.len())]).collect();
            if label == 1 {
                let at = rng.gen_range(0..=words.len());
                words.insert(at, "apple");
            }
            texts.push(words.join(" "));
            labels.push(label);
        }
        LabeledDataset::new(texts, labels, 2).unwrap()
    }


    #[test]
    fn classifier_learns_a_keyword_rule_and_best_beats_final() {
        let train = keyword_dataset(60, 100);
        let valid = keyword_dataset(24, 200);
        let tok = word_tokenizer(&train.texts);
        let lm = build_language_model(&tiny_model_cfg(tok.vocab_size()), 17).unwrap();
        let cfg = TrainConfig { clf_epochs: 10, lr_max: 1e-2, ..tiny_train_cfg(17) };
        let (clf, report) =
            finetune_classifier(&lm, &tok, &train, &valid, &cfg, &mut NullObserver).unwrap();
        assert_eq!(clf.n_classes, 2);
        assert!(
            report.best_val_accuracy >= 0.9,
            "keyword rule should be learnable: accuracy {}",
            report.best_val_accuracy
        );
        assert!(report.best_val_accuracy >= report.final_val_accuracy);
        let returned = classifier_accuracy(&clf, &tok, &valid, cfg.clf_batch).unwrap();
        assert_eq!(returned, report.best_val_accuracy);
    }

    #[test]
    fn zero_classifier_epochs_return_the_transferred_model_unchanged() {
        let train = keyword_dataset(12, 1);
        let valid = keyword_dataset(6, 2);
        let tok = word_tokenizer(&train.texts);
        let lm = build_language_model(&tiny_model_cfg(tok.vocab_size()), 9).unwrap();
        let cfg = TrainConfig { clf_epochs: 0, ..tiny_train_cfg(9) };
        let (clf, report) =
            finetune_classifier(&lm, &tok, &train, &valid, &cfg, &mut NullObserver).unwrap();
        let reference = transfer_encoder(&lm, &lm.config, 2, cfg.seed).unwrap();
        for (name, tensor) in reference.params.iter() {
            assert_eq!(
                tensor.data(),
                clf.params.get(name).unwrap().data(),
                "{name} must be untouched by a zero-epoch run"
            );
        }
        assert!(report.best_epoch.is_none());
        assert_eq!(report.best_val_accuracy, report.final_val_accuracy);
    }

    #[test]
    fn classifier_runs_with_same_seed_are_bitwise_identical() {
        let train = keyword_dataset(24, 50);
        let valid = keyword_dataset(12, 51);
        let tok = word_tokenizer(&train.texts);
        let lm = build_language_model(&tiny_model_cfg(tok.vocab_size()), 21).unwrap();
        let cfg = TrainConfig { clf_epochs: 2, ..tiny_train_cfg(21) };
        let (c1, r1) =
            finetune_classifier(&lm, &tok, &train, &valid, &cfg, &mut NullObserver).unwrap();
        let (c2, r2) =
            finetune_classifier(&lm, &tok, &train, &valid, &cfg, &mut NullObserver).unwrap();
        assert_eq!(r1.best_val_accuracy, r2.best_val_accuracy);
        for (name, tensor) in c1.params.iter() {
            assert_eq!(tensor.data(), c2.params.get(name).unwrap().data(), "{name} diverged");
        }
        assert_eq!(
            r1.epochs.last().unwrap().train_loss.to_bits(),
            r2.epochs.last().unwrap().train_loss.to_bits()
        );
    }

    #[test]
    fn validation_split_holds_out_the_final_lines() {
        let corpus: Vec<String> = (0..40).map(|i| format!("line {i}")).collect();
        let (train, val) = split_validation_lines(&corpus, 0.05);
        assert_eq!(train.len(), 38);
        assert_eq!(val, vec!["line 38", "line 39"]);
        let single = vec!["only line".to_string()];
        let (t1, v1) = split_validation_lines(&single, 0.05);
        assert_eq!(t1, v1);
    }

    #[test]
    fn stream_encoding_appends_eos_per_line() {
        let corpus = vec!["a b".to_string(), "a".to_string()];
        let tok = word_tokenizer(&corpus);
        let stream = corpus_to_stream(&tok, &["a b", "a"]);
        let a = tok.piece_id("a").unwrap();
        let b = tok.piece_id("b").unwrap();
        assert_eq!(stream, vec![a, b, tok.eos, a, tok.eos]);
    }
}
