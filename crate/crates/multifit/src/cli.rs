//! Command-line shell over the pipeline: tokenizer training and encoding,
//! the three transfer stages, pseudo-label bootstrapping, the noise
//! benchmark, the cell speed benchmark, and the gradient self-check.
//!
//! Exit codes partition failures: 0 success, 1 usage, 2 data, 3 numeric.
//! `MULTIFIT_SEED` overrides the default seed and is itself overridden by
//! a config-file `train.seed` or the `--seed` flag.

use std::ffi::OsString;
use std::io::Read;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::bench::{speed_benchmark, BenchSpec};
use crate::bootstrap::{bootstrap_train, ingest_teacher_predictions, noise_robustness_run,
    noise_table_tsv, EvalSet, UnlabeledSet};
use crate::checkpoint::{classifier_checkpoint, fnv1a64, lm_checkpoint, lm_from_checkpoint,
    load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::error::CliError;
use crate::gradcheck::check_lm_gradients;
use crate::metrics::MetricsWriter;
use crate::network::{LanguageModel, ModelConfig};
use crate::tokenizer::{strategy, strategy_names, TokenizerModel, TrainOptions};
use crate::train::{finetune_classifier, finetune_lm, pretrain_lm, LabeledDataset, MetricRecord,
    NullObserver, TrainObserver};

#[derive(Parser)]
#[command(
    name = "multifit",
    version,
    about = "QRNN language-model transfer pipeline: tokenize, pretrain, fine-tune, bootstrap"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every training command.
#[derive(Args, Debug)]
struct RunOpts {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set train.lr_max=0.004 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run seed; overrides the config file and MULTIFIT_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Write JSON-lines metrics to this file.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a tokenizer on a plain-text corpus (one document per line).
    TokTrain {
        /// Corpus file.
        #[arg(long)]
        input: PathBuf,
        /// Where to write the tokenizer model.
        #[arg(long)]
        model_out: PathBuf,
        /// Segmentation strategy.
        #[arg(long, default_value = "unigram")]
        strategy: String,
        /// Content vocabulary size.
        #[arg(long, default_value_t = 15_000)]
        vocab: usize,
        /// Fraction of character occurrences that must stay encodable.
        #[arg(long, default_value_t = 1.0)]
        char_coverage: f64,
        #[arg(long, default_value_t = 16)]
        max_piece_len: usize,
    },
    /// Encode text with a trained tokenizer, one line per input line.
    TokEncode {
        /// Tokenizer model file.
        #[arg(long)]
        model: PathBuf,
        /// Input file; stdin when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Print numeric piece ids instead of piece texts.
        #[arg(long)]
        ids: bool,
    },
    /// Pretrain the language model on a general-domain corpus.
    LmPretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        /// Where to write the model checkpoint.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunOpts,
    },
    /// Continue language-model training on target-domain text.
    LmFinetune {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        /// Input checkpoint from lm-pretrain.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunOpts,
    },
    /// Train the classifier head on labeled data (<class>\t<text> TSV).
    ClfTrain {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        /// Language-model checkpoint to transfer from.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Where to write the classifier checkpoint.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunOpts,
    },
    /// Train from teacher pseudo labels over unlabeled target text.
    Bootstrap {
        /// Unlabeled texts: <example_id>\t<text> TSV.
        #[arg(long)]
        unlabeled: PathBuf,
        /// Teacher predictions: <example_id>\t<class_id>[\t<confidence>].
        #[arg(long)]
        teacher: PathBuf,
        /// Gold evaluation set: <example_id>\t<class_id>\t<text> TSV.
        #[arg(long)]
        eval: PathBuf,
        /// Number of classes in the task.
        #[arg(long)]
        n_classes: usize,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Optional classifier checkpoint output.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        run: RunOpts,
    },
    /// Measure accuracy under label noise: pretrained vs random encoder.
    NoiseBench {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated noise probabilities, each in [0, 0.75].
        #[arg(long, default_value = "0,0.25,0.5,0.75")]
        grid: String,
        /// Optional TSV output; the table always prints to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        run: RunOpts,
    },
    /// Time one training batch per recurrent cell and report the ratio.
    SpeedBench {
        #[arg(long, default_value_t = 64)]
        hidden: usize,
        #[arg(long, default_value_t = 64)]
        emb: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 70)]
        bptt: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 9)]
        reps: usize,
        #[arg(long, default_value_t = 1000)]
        vocab: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Verify backward-pass gradients against finite differences.
    GradCheck {
        #[arg(long, default_value_t = 40)]
        vocab: usize,
        #[arg(long, default_value_t = 8)]
        emb: usize,
        #[arg(long, default_value_t = 12)]
        hidden: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        /// Window length of the checked batch.
        #[arg(long, default_value_t = 5)]
        bptt: usize,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

/// Run with the process arguments and turn the outcome into an exit code.
pub fn run() -> i32 {
    run_command(std::env::args_os())
}

/// Dispatch `argv` (including the program name); errors print to stderr.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match execute(argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn execute<I, T>(argv: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.to_string())),
    };
    match cli.command {
        Command::TokTrain { input, model_out, strategy: name, vocab, char_coverage, max_piece_len } => {
            let corpus = read_corpus(&input)?;
            let options = TrainOptions {
                target_vocab: vocab,
                char_coverage,
                max_piece_len,
                ..TrainOptions::default()
            };
            if !strategy_names().iter().any(|s| *s == name) {
                return Err(CliError::Usage(format!(
                    "unknown strategy '{name}'; known: {}",
                    strategy_names().join(", ")
                )));
            }
            let model = strategy(&name)?.train(&corpus, &options)?;
            model.save(&model_out)?;
            println!(
                "trained {name} tokenizer: {} pieces ({} content) -> {}",
                model.vocab_size(),
                model.content_size(),
                model_out.display()
            );
            Ok(())
        }
        Command::TokEncode { model, input, ids } => {
            let tokenizer = TokenizerModel::load(&model)?;
            let text = match input {
                Some(path) => std::fs::read_to_string(path)?,
                None => {
                    let mut buf = String::new();
                    std::io::stdin().read_to_string(&mut buf)?;
                    buf
                }
            };
            for line in text.lines() {
                let seg = tokenizer.segment(line);
                let rendered: Vec<String> = if ids {
                    seg.ids.iter().map(|id| id.to_string()).collect()
                } else {
                    seg.ids
                        .iter()
                        .map(|&id| tokenizer.piece_text(id).unwrap_or("<?>").to_string())
                        .collect()
                };
                println!("{}", rendered.join(" "));
            }
            Ok(())
        }
        Command::LmPretrain { corpus, tokenizer, out, run } => {
            let mut cfg = resolve_config(&run)?;
            let corpus = read_corpus(&corpus)?;
            let (tok, tok_hash) = load_tokenizer(&tokenizer)?;
            cfg.model.vocab_size = tok.vocab_size();
            let mut observer = make_observer(&run, &cfg)?;
            let (model, report) =
                pretrain_lm(&corpus, &tok, &cfg.model, &cfg.train, observer.as_observer())?;
            observer.finish()?;
            for epoch in &report.epochs {
                println!(
                    "[pretrain] epoch {}: train ppl {:.3}, valid ppl {:.3}",
                    epoch.epoch, epoch.train_ppl, epoch.val_ppl
                );
            }
            if report.dropped_tokens > 0 {
                println!("[pretrain] {} tokens dropped by batching", report.dropped_tokens);
            }
            save_checkpoint(&out, &lm_checkpoint(&model, &cfg, Some(tok_hash)))?;
            println!("saved checkpoint -> {}", out.display());
            Ok(())
        }
        Command::LmFinetune { corpus, tokenizer, checkpoint, out, run } => {
            let (mut model, cfg, tok, tok_hash) =
                load_model_for_training(&checkpoint, &tokenizer, &run)?;
            let corpus = read_corpus(&corpus)?;
            let mut observer = make_observer(&run, &cfg)?;
            let report = finetune_lm(&mut model, &corpus, &tok, &cfg.train, observer.as_observer())?;
            observer.finish()?;
            for epoch in &report.epochs {
                println!(
                    "[lm-finetune] epoch {}: train ppl {:.3}, valid ppl {:.3}",
                    epoch.epoch, epoch.train_ppl, epoch.val_ppl
                );
            }
            save_checkpoint(&out, &lm_checkpoint(&model, &cfg, Some(tok_hash)))?;
            println!("saved checkpoint -> {}", out.display());
            Ok(())
        }
        Command::ClfTrain { train, valid, tokenizer, checkpoint, out, run } => {
            let (model, cfg, tok, tok_hash) =
                load_model_for_training(&checkpoint, &tokenizer, &run)?;
            let train_set = LabeledDataset::from_tsv(&train)?;
            let valid_set = LabeledDataset::from_tsv(&valid)?;
            let mut observer = make_observer(&run, &cfg)?;
            let (clf, report) = finetune_classifier(
                &model,
                &tok,
                &train_set,
                &valid_set,
                &cfg.train,
                observer.as_observer(),
            )?;
            observer.finish()?;
            println!(
                "[classifier] best validation accuracy {:.4}{}, final {:.4}",
                report.best_val_accuracy,
                report.best_epoch.map_or(String::new(), |e| format!(" (epoch {e})")),
                report.final_val_accuracy
            );
            save_checkpoint(&out, &classifier_checkpoint(&clf, &cfg, Some(tok_hash)))?;
            println!("saved classifier -> {}", out.display());
            Ok(())
        }
        Command::Bootstrap { unlabeled, teacher, eval, n_classes, tokenizer, checkpoint, out, run } => {
            let (model, cfg, tok, tok_hash) =
                load_model_for_training(&checkpoint, &tokenizer, &run)?;
            let unlabeled_set = UnlabeledSet::from_tsv(&unlabeled)?;
            let teacher_name =
                teacher.file_stem().map_or_else(|| "teacher".into(), |s| s.to_string_lossy().into_owned());
            let pseudo = ingest_teacher_predictions(&teacher, n_classes, &teacher_name)?;
            let eval_set = EvalSet::from_tsv(&eval, n_classes)?;
            let mut observer = make_observer(&run, &cfg)?;
            let outcome = bootstrap_train(
                &model,
                &tok,
                &unlabeled_set,
                &pseudo,
                &eval_set,
                &cfg.train,
                observer.as_observer(),
            )?;
            observer.finish()?;
            println!(
                "[bootstrap] trained on {} pseudo-labeled examples from '{}'",
                outcome.trained_examples, pseudo.source
            );
            match outcome.teacher_accuracy {
                Some(acc) => println!("[bootstrap] teacher accuracy on gold eval: {acc:.4}"),
                None => println!("[bootstrap] teacher labeled no gold eval example"),
            }
            println!("[bootstrap] student accuracy on gold eval: {:.4}", outcome.student_accuracy);
            if let Some(path) = out {
                save_checkpoint(
                    &path,
                    &classifier_checkpoint(&outcome.classifier, &cfg, Some(tok_hash)),
                )?;
                println!("saved classifier -> {}", path.display());
            }
            Ok(())
        }
        Command::NoiseBench { train, test, tokenizer, checkpoint, grid, out, run } => {
            let (model, cfg, tok, _) = load_model_for_training(&checkpoint, &tokenizer, &run)?;
            let train_set = LabeledDataset::from_tsv(&train)?;
            let test_set = LabeledDataset::from_tsv(&test)?;
            let grid = parse_grid(&grid)?;
            let mut observer = make_observer(&run, &cfg)?;
            let rows = noise_robustness_run(
                &model,
                &tok,
                &train_set,
                &test_set,
                &grid,
                &cfg.train,
                observer.as_observer(),
            )?;
            observer.finish()?;
            let table = noise_table_tsv(&rows);
            print!("{table}");
            if let Some(path) = out {
                std::fs::write(&path, table)?;
                println!("wrote table -> {}", path.display());
            }
            Ok(())
        }
        Command::SpeedBench { hidden, emb, layers, bptt, batch, reps, vocab, seed } => {
            let spec = BenchSpec {
                vocab,
                emb_dim: emb,
                hidden_dim: hidden,
                n_layers: layers,
                bptt,
                batch,
                reps,
                seed,
            };
            let report = speed_benchmark(&spec)?;
            for row in &report.rows {
                println!("{}: {:.3} ms/batch (median of {} reps)", row.cell, row.per_batch_ms, reps);
            }
            println!("speedup lstm/qrnn: {:.2}x", report.speedup);
            Ok(())
        }
        Command::GradCheck { vocab, emb, hidden, layers, bptt, batch, tol, seed } => {
            let config = ModelConfig::tiny(vocab, emb, hidden, layers);
            let report = check_lm_gradients(&config, bptt, batch, seed, 1e-5)?;
            let worst = report.max_rel_err();
            println!(
                "checked {} parameter tensors; max relative error {worst:.3e} (tolerance {tol:.1e})",
                report.entries.len()
            );
            if worst < tol {
                Ok(())
            } else {
                let entry = report.entries.first().expect("nonempty report");
                Err(CliError::Numeric(format!(
                    "gradient check failed: '{}' disagrees with finite differences by {:.3e} \
                     (analytic {:.6e}, numeric {:.6e})",
                    entry.name, entry.max_rel_err, entry.analytic, entry.numeric
                )))
            }
        }
    }
}

/// Corpus lines, rejecting unreadable files with the path in the message.
fn read_corpus(path: &Path) -> Result<Vec<String>, CliError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(raw.lines().map(|l| l.to_string()).collect())
}

fn load_tokenizer(path: &Path) -> Result<(TokenizerModel, u64), CliError> {
    let bytes =
        std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let hash = fnv1a64(&bytes);
    let tok = TokenizerModel::load(path)?;
    Ok((tok, hash))
}

/// Defaults, then MULTIFIT_SEED, then the config file, then --set pairs,
/// then --seed.
fn resolve_config(run: &RunOpts) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Ok(value) = std::env::var("MULTIFIT_SEED") {
        cfg.set("train.seed", &value, None)
            .map_err(|e| CliError::Usage(format!("MULTIFIT_SEED: {e}")))?;
    }
    if let Some(path) = &run.config {
        cfg.apply_file(path)?;
    }
    for pair in &run.set {
        let (key, value) = pair.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("--set expects KEY=VALUE, got '{pair}'"))
        })?;
        cfg.set(key.trim(), value, None)?;
    }
    if let Some(seed) = run.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

/// Load an LM checkpoint plus the tokenizer it will train with, verifying
/// the tokenizer is the one the checkpoint was built against. Training
/// settings come from the usual precedence chain, the architecture from
/// the checkpoint.
fn load_model_for_training(
    checkpoint: &Path,
    tokenizer: &Path,
    run: &RunOpts,
) -> Result<(LanguageModel, RunConfig, TokenizerModel, u64), CliError> {
    let cp = load_checkpoint(checkpoint)?;
    let (model, _stored) = lm_from_checkpoint(&cp)?;
    let (tok, tok_hash) = load_tokenizer(tokenizer)?;
    if let Some(stored_hash) = cp.meta().get("tokenizer_hash") {
        let stated = u64::from_str_radix(stored_hash, 16)
            .map_err(|_| CliError::Data(format!("bad tokenizer hash '{stored_hash}'")))?;
        if stated != tok_hash {
            return Err(CliError::Data(format!(
                "tokenizer {} is not the one this checkpoint was trained with \
                 (content hash {tok_hash:016x}, checkpoint records {stated:016x})",
                tokenizer.display()
            )));
        }
    }
    let mut cfg = resolve_config(run)?;
    cfg.model = model.config.clone();
    Ok((model, cfg, tok, tok_hash))
}

fn parse_grid(grid: &str) -> Result<Vec<f64>, CliError> {
    grid.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("bad grid entry '{p}'")))
        })
        .collect()
}

/// Either a metrics file or nothing; unifies the observer handed to the
/// training stages.
enum Observer {
    File(MetricsWriter<std::io::BufWriter<std::fs::File>>),
    Null(NullObserver),
}

impl Observer {
    fn as_observer(&mut self) -> &mut dyn TrainObserver {
        match self {
            Observer::File(w) => w,
            Observer::Null(n) => n,
        }
    }

    fn finish(self) -> Result<(), CliError> {
        match self {
            Observer::File(w) => w.finish().map_err(CliError::from),
            Observer::Null(_) => Ok(()),
        }
    }
}

fn make_observer(run: &RunOpts, cfg: &RunConfig) -> Result<Observer, CliError> {
    match &run.metrics {
        Some(path) => Ok(Observer::File(MetricsWriter::create(path, &cfg.echo())?)),
        None => Ok(Observer::Null(NullObserver)),
    }
}

// Re-exported for integration tests that watch observer plumbing.
#[allow(unused)]
fn _record_type_check(r: &MetricRecord) -> &'static str {
    r.stage
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> i32 {
        run_command(std::iter::once("multifit").chain(args.iter().copied()))
    }

    #[test]
    fn no_arguments_is_a_usage_error() {
        assert_eq!(run_command(["multifit"]), 1);
    }

    #[test]
    fn unknown_subcommand_is_a_usage_error() {
        assert_eq!(run_args(&["frobnicate"]), 1);
    }

    #[test]
    fn help_exits_cleanly() {
        assert_eq!(run_args(&["--help"]), 0);
        assert_eq!(run_args(&["tok-train", "--help"]), 0);
    }

    #[test]
    fn missing_data_file_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("tok.model");
        let code = run_args(&[
            "tok-train",
            "--input",
            "/nonexistent/corpus.txt",
            "--model-out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn gradient_check_on_the_tiny_model_passes() {
        let code = run_args(&[
            "grad-check", "--vocab", "12", "--emb", "4", "--hidden", "6", "--layers", "1",
            "--bptt", "3", "--batch", "2",
        ]);
        assert_eq!(code, 0);
    }

    #[test]
    fn tok_train_then_encode_round_trips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus.txt");
        std::fs::write(&corpus, "the cat sat\nthe dog sat\nthe cat ran\n").unwrap();
        let model = dir.path().join("tok.model");
        let code = run_args(&[
            "tok-train",
            "--input",
            corpus.to_str().unwrap(),
            "--model-out",
            model.to_str().unwrap(),
            "--strategy",
            "word",
            "--vocab",
            "32",
        ]);
        assert_eq!(code, 0);
        let input = dir.path().join("encode-me.txt");
        std::fs::write(&input, "the cat ran\n").unwrap();
        let code = run_args(&[
            "tok-encode",
            "--model",
            model.to_str().unwrap(),
            "--input",
            input.to_str().unwrap(),
            "--ids",
        ]);
        assert_eq!(code, 0);
    }

    #[test]
    fn grid_parsing_rejects_garbage() {
        assert_eq!(parse_grid("0,0.25").unwrap(), vec![0.0, 0.25]);
        assert!(parse_grid("0,banana").is_err());
    }

    #[test]
    fn set_pairs_need_an_equals_sign() {
        let run = RunOpts {
            config: None,
            set: vec!["train.lr_max".into()],
            seed: None,
            metrics: None,
        };
        let err = resolve_config(&run).err().unwrap();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn seed_flag_beats_set_pairs() {
        let run = RunOpts {
            config: None,
            set: vec!["train.seed=7".into()],
            seed: Some(11),
            metrics: None,
        };
        let cfg = resolve_config(&run).unwrap();
        assert_eq!(cfg.train.seed, 11);
    }
}
