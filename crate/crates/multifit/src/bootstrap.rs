//! Cross-lingual bootstrapping: train a monolingual classifier from a
//! teacher model's pseudo labels over unlabeled target-language text, and
//! measure robustness to label noise with paired pretrained/random runs.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{BootstrapError, NumericsError, TrainError};
use crate::network::{build_language_model, LanguageModel, TextClassifier};
use crate::tokenizer::TokenizerModel;
use crate::train::data::LabeledDataset;
use crate::train::trainer::{
    derive_seed, finetune_classifier, ClassifierReport, TrainConfig, TrainObserver,
};

/// One teacher prediction for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoRecord {
    pub id: String,
    pub class: usize,
    pub confidence: f64,
}

/// The teacher's predictions: unique ids, classes inside the task's range.
/// Confidences are carried along but do not enter the default loss.
#[derive(Clone, Debug)]
pub struct PseudoLabelSet {
    pub records: Vec<PseudoRecord>,
    /// Teacher name, recorded for reporting only.
    pub source: String,
    pub n_classes: usize,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Id-to-class lookup over the records.
    pub fn by_id(&self) -> HashMap<&str, usize> {
        self.records.iter().map(|r| (r.id.as_str(), r.class)).collect()
    }
}

/// Parse a teacher-prediction file: one `<example_id>\t<class_id>` record
/// per line with an optional third confidence column in [0,1] (default 1),
/// `#`-prefixed comment lines and blank lines ignored.
pub fn ingest_teacher_predictions(
    path: &Path,
    n_classes: usize,
    source: &str,
) -> Result<PseudoLabelSet, BootstrapError> {
    let raw = std::fs::read_to_string(path)?;
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let mut cols = line.split('\t');
        let id = cols.next().unwrap_or_default();
        if id.is_empty() {
            return Err(BootstrapError::BadRecord {
                line: lineno,
                what: "empty example id".into(),
            });
        }
        let class_str = cols.next().ok_or_else(|| BootstrapError::BadRecord {
            line: lineno,
            what: "expected <example_id>\\t<class_id>[\\t<confidence>]".into(),
        })?;
        let class: usize = class_str.parse().map_err(|_| BootstrapError::BadRecord {
            line: lineno,
            what: format!("class id '{class_str}' is not a non-negative integer"),
        })?;
        if class >= n_classes {
            return Err(BootstrapError::UnknownClass { class, classes: n_classes, line: lineno });
        }
        let confidence = match cols.next() {
            None => 1.0,
            Some(c) => {
                let v: f64 = c.parse().map_err(|_| BootstrapError::BadRecord {
                    line: lineno,
                    what: format!("confidence '{c}' is not a number"),
                })?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(BootstrapError::BadRecord {
                        line: lineno,
                        what: format!("confidence {v} outside [0, 1]"),
                    });
                }
                v
            }
        };
        if cols.next().is_some() {
            return Err(BootstrapError::BadRecord {
                line: lineno,
                what: "too many columns".into(),
            });
        }
        if !seen.insert(id.to_string()) {
            return Err(BootstrapError::DuplicateId { id: id.to_string(), line: lineno });
        }
        records.push(PseudoRecord { id: id.to_string(), class, confidence });
    }
    Ok(PseudoLabelSet { records, source: source.to_string(), n_classes })
}

/// Unlabeled target-language texts addressable by example id.
#[derive(Clone, Debug)]
pub struct UnlabeledSet {
    pub ids: Vec<String>,
    pub texts: Vec<String>,
    index: HashMap<String, usize>,
}

impl UnlabeledSet {
    pub fn new(pairs: Vec<(String, String)>) -> Result<Self, BootstrapError> {
        let mut ids = Vec::with_capacity(pairs.len());
        let mut texts = Vec::with_capacity(pairs.len());
        let mut index = HashMap::with_capacity(pairs.len());
        for (pos, (id, text)) in pairs.into_iter().enumerate() {
            let lineno = pos + 1;
            if id.is_empty() {
                return Err(BootstrapError::BadRecord {
                    line: lineno,
                    what: "empty example id".into(),
                });
            }
            if text.trim().is_empty() {
                return Err(BootstrapError::BadRecord {
                    line: lineno,
                    what: format!("example '{id}' has empty text"),
                });
            }
            if index.insert(id.clone(), ids.len()).is_some() {
                return Err(BootstrapError::DuplicateId { id, line: lineno });
            }
            ids.push(id);
            texts.push(text);
        }
        Ok(UnlabeledSet { ids, texts, index })
    }

    /// Parse `<example_id>\t<text>` lines; `#` comments and blanks ignored.
    pub fn from_tsv(path: &Path) -> Result<Self, BootstrapError> {
        let raw = std::fs::read_to_string(path)?;
        let mut pairs = Vec::new();
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (id, text) = line.split_once('\t').ok_or_else(|| BootstrapError::BadRecord {
                line: i + 1,
                what: "expected <example_id>\\t<text>".into(),
            })?;
            pairs.push((id.to_string(), text.to_string()));
        }
        UnlabeledSet::new(pairs)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn text_of(&self, id: &str) -> Option<&str> {
        self.index.get(id).map(|&i| self.texts[i].as_str())
    }
}

/// Gold-labeled evaluation examples keyed by id so teacher predictions can
/// be scored against them.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub ids: Vec<String>,
    pub dataset: LabeledDataset,
}

impl EvalSet {
    /// Parse `<example_id>\t<class_id>\t<text>` lines; `#` comments and
    /// blanks ignored. The class count is the largest class seen plus one,
    /// or `min_classes` if that is larger.
    pub fn from_tsv(path: &Path, min_classes: usize) -> Result<Self, BootstrapError> {
        let raw = std::fs::read_to_string(path)?;
        let mut ids = Vec::new();
        let mut texts = Vec::new();
        let mut labels = Vec::new();
        for (i, line) in raw.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let mut cols = line.splitn(3, '\t');
            let (id, class_str, text) = match (cols.next(), cols.next(), cols.next()) {
                (Some(a), Some(b), Some(c)) => (a, b, c),
                _ => {
                    return Err(BootstrapError::BadRecord {
                        line: lineno,
                        what: "expected <example_id>\\t<class_id>\\t<text>".into(),
                    })
                }
            };
            let class: usize = class_str.parse().map_err(|_| BootstrapError::BadRecord {
                line: lineno,
                what: format!("class id '{class_str}' is not a non-negative integer"),
            })?;
            ids.push(id.to_string());
            texts.push(text.to_string());
            labels.push(class);
        }
        let n_classes = labels.iter().max().map_or(0, |&m| m + 1).max(min_classes);
        let dataset =
            LabeledDataset::new(texts, labels, n_classes).map_err(BootstrapError::Train)?;
        EvalSet::new(ids, dataset)
    }

    pub fn new(ids: Vec<String>, dataset: LabeledDataset) -> Result<Self, BootstrapError> {
        if ids.len() != dataset.len() {
            return Err(BootstrapError::BadRecord {
                line: 0,
                what: format!("{} ids for {} examples", ids.len(), dataset.len()),
            });
        }
        let mut seen = HashSet::new();
        for (pos, id) in ids.iter().enumerate() {
            if !seen.insert(id.as_str()) {
                return Err(BootstrapError::DuplicateId { id: id.clone(), line: pos + 1 });
            }
        }
        Ok(EvalSet { ids, dataset })
    }
}

/// Everything a bootstrapping run produces: the student classifier, its
/// training report, and the student-versus-teacher comparison on gold data.
pub struct BootstrapOutcome {
    pub classifier: TextClassifier,
    pub report: ClassifierReport,
    /// Student accuracy on the gold evaluation set.
    pub student_accuracy: f64,
    /// Fraction of gold evaluation examples where the teacher's pseudo
    /// label agrees with gold — recomputed here, never trusted from input.
    /// `None` when the teacher labeled no evaluation example.
    pub teacher_accuracy: Option<f64>,
    /// Number of unlabeled examples that received a pseudo label.
    pub trained_examples: usize,
}

/// Train the classifier on the teacher's pseudo labels over unlabeled
/// texts using exactly the supervised fine-tuning mechanics, then report
/// student and teacher accuracy on the gold evaluation set.
pub fn bootstrap_train(
    lm: &LanguageModel,
    tokenizer: &TokenizerModel,
    unlabeled: &UnlabeledSet,
    pseudo: &PseudoLabelSet,
    eval: &EvalSet,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<BootstrapOutcome, BootstrapError> {
    if pseudo.is_empty() {
        return Err(BootstrapError::EmptyPseudoSet);
    }
    let eval_ids: HashSet<&str> = eval.ids.iter().map(|s| s.as_str()).collect();
    let unresolved: Vec<String> = pseudo
        .records
        .iter()
        .filter(|r| unlabeled.text_of(&r.id).is_none() && !eval_ids.contains(r.id.as_str()))
        .map(|r| r.id.clone())
        .collect();
    if !unresolved.is_empty() {
        return Err(BootstrapError::UnresolvedIds {
            count: unresolved.len(),
            sample: unresolved.into_iter().take(10).collect(),
        });
    }
    let by_id = pseudo.by_id();
    let mut texts = Vec::new();
    let mut labels = Vec::new();
    for (id, text) in unlabeled.ids.iter().zip(&unlabeled.texts) {
        if let Some(&class) = by_id.get(id.as_str()) {
            texts.push(text.clone());
            labels.push(class);
        }
    }
    if texts.is_empty() {
        return Err(BootstrapError::EmptyPseudoSet);
    }
    let trained_examples = texts.len();
    let n_classes = pseudo.n_classes.max(eval.dataset.n_classes);
    let train = LabeledDataset::new(texts, labels, n_classes).map_err(BootstrapError::Train)?;
    let (classifier, report) =
        finetune_classifier(lm, tokenizer, &train, &eval.dataset, cfg, observer)
            .map_err(BootstrapError::Train)?;
    let mut covered = 0usize;
    let mut agree = 0usize;
    for (id, &gold) in eval.ids.iter().zip(&eval.dataset.labels) {
        if let Some(&predicted) = by_id.get(id.as_str()) {
            covered += 1;
            if predicted == gold {
                agree += 1;
            }
        }
    }
    let teacher_accuracy = (covered > 0).then(|| agree as f64 / covered as f64);
    let student_accuracy = report.best_val_accuracy;
    Ok(BootstrapOutcome { classifier, report, student_accuracy, teacher_accuracy, trained_examples })
}

/// Label-noise settings: each example's label flips to a uniformly drawn
/// *different* class with probability `probability`.
#[derive(Clone, Copy, Debug)]
pub struct NoiseSpec {
    pub probability: f64,
    pub seed: u64,
    pub n_classes: usize,
}

impl NoiseSpec {
    pub fn new(probability: f64, seed: u64, n_classes: usize) -> Self {
        NoiseSpec { probability, seed, n_classes }
    }
}

/// Perturb labels per the spec above. Expected correct fraction afterwards
/// is `1 - p`, the noise harness's theoretical baseline.
pub fn perturb_labels(
    data: &LabeledDataset,
    spec: &NoiseSpec,
) -> Result<LabeledDataset, BootstrapError> {
    if !(0.0..=1.0).contains(&spec.probability) {
        return Err(BootstrapError::BadProbability(spec.probability));
    }
    let k = data.n_classes;
    if spec.n_classes != k {
        return Err(BootstrapError::Train(TrainError::Numerics(NumericsError::InvalidConfig {
            what: format!("noise spec built for {} classes, dataset has {k}", spec.n_classes),
        })));
    }
    if k < 2 {
        return Err(BootstrapError::Train(TrainError::Numerics(NumericsError::InvalidConfig {
            what: "label perturbation needs at least 2 classes".into(),
        })));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let labels: Vec<usize> = data
        .labels
        .iter()
        .map(|&old| {
            if rng.gen::<f64>() < spec.probability {
                let mut replacement = rng.gen_range(0..k - 1);
                if replacement >= old {
                    replacement += 1;
                }
                replacement
            } else {
                old
            }
        })
        .collect();
    LabeledDataset::new(data.texts.clone(), labels, k).map_err(BootstrapError::Train)
}

/// One row of the noise-robustness table.
#[derive(Clone, Copy, Debug)]
pub struct NoiseRow {
    pub probability: f64,
    pub acc_pretrained: f64,
    pub acc_random: f64,
    /// Expected fraction of still-correct labels, `1 - p`.
    pub baseline: f64,
}

/// For each probability in `grid`, perturb the training labels once, then
/// train two classifiers on the same noisy data — one transferred from the
/// pretrained language model, one from a freshly initialized model of the
/// same architecture — and score both on the clean test set. Both arms of
/// a pair share the training seed, so they differ only in encoder
/// initialization.
pub fn noise_robustness_run(
    lm: &LanguageModel,
    tokenizer: &TokenizerModel,
    train: &LabeledDataset,
    test: &LabeledDataset,
    grid: &[f64],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<NoiseRow>, BootstrapError> {
    for &p in grid {
        if !(0.0..=0.75).contains(&p) {
            return Err(BootstrapError::BadProbability(p));
        }
    }
    let mut rows = Vec::with_capacity(grid.len());
    for (i, &p) in grid.iter().enumerate() {
        let spec =
            NoiseSpec::new(p, derive_seed(cfg.seed, &format!("noise-row-{i}")), train.n_classes);
        let noisy = perturb_labels(train, &spec)?;
        let (_, pretrained) = finetune_classifier(lm, tokenizer, &noisy, test, cfg, observer)
            .map_err(BootstrapError::Train)?;
        let random_lm =
            build_language_model(&lm.config, derive_seed(cfg.seed, &format!("random-init-{i}")))
                .map_err(TrainError::from)?;
        let (_, random) = finetune_classifier(&random_lm, tokenizer, &noisy, test, cfg, observer)
            .map_err(BootstrapError::Train)?;
        rows.push(NoiseRow {
            probability: p,
            acc_pretrained: pretrained.best_val_accuracy,
            acc_random: random.best_val_accuracy,
            baseline: 1.0 - p,
        });
    }
    Ok(rows)
}

/// Render the noise table as TSV: `p<TAB>acc_pretrained<TAB>acc_random<TAB>baseline`.
pub fn noise_table_tsv(rows: &[NoiseRow]) -> String {
    let mut out = String::from("#p\tacc_pretrained\tacc_random\tbaseline\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{:.4}\t{:.4}\t{}",
            r.probability, r.acc_pretrained, r.acc_random, r.baseline
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;
    use crate::tokenizer::{strategy, TrainOptions};
    use crate::train::trainer::NullObserver;

    fn write_tmp(content: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("teacher.tsv");
        std::fs::write(&path, content).unwrap();
        (dir, path)
    }

    #[test]
    fn three_records_parse_with_default_confidence() {
        let (_dir, path) = write_tmp("# teacher output\na\t0\nb\t1\t0.75\n\nc\t2\n");
        let set = ingest_teacher_predictions(&path, 3, "toy-teacher").unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set.source, "toy-teacher");
        assert_eq!(set.records[0], PseudoRecord { id: "a".into(), class: 0, confidence: 1.0 });
        assert_eq!(set.records[1].confidence, 0.75);
        assert_eq!(set.records[2].id, "c");
    }

    #[test]
    fn duplicate_id_is_rejected_with_line_number() {
        let (_dir, path) = write_tmp("a\t0\nb\t1\na\t2\n");
        let err = ingest_teacher_predictions(&path, 3, "t").unwrap_err();
        match err {
            BootstrapError::DuplicateId { id, line } => {
                assert_eq!(id, "a");
                assert_eq!(line, 3);
            }
            other => panic!("expected DuplicateId, got {other:?}"),
        }
    }

    #[test]
    fn unknown_class_is_rejected_with_line_number() {
        let (_dir, path) = write_tmp("a\t0\nb\t7\n");
        let err = ingest_teacher_predictions(&path, 3, "t").unwrap_err();
        assert!(matches!(err, BootstrapError::UnknownClass { class: 7, classes: 3, line: 2 }));
    }

    #[test]
    fn malformed_confidence_is_rejected() {
        let (_dir, path) = write_tmp("a\t0\t1.5\n");
        assert!(matches!(
            ingest_teacher_predictions(&path, 3, "t").unwrap_err(),
            BootstrapError::BadRecord { line: 1, .. }
        ));
        let (_dir2, path2) = write_tmp("a\t0\tmaybe\n");
        assert!(matches!(
            ingest_teacher_predictions(&path2, 3, "t").unwrap_err(),
            BootstrapError::BadRecord { line: 1, .. }
        ));
    }

    #[test]
    fn eval_set_parses_three_columns_and_keeps_ids_aligned() {
        let (_dir, path) = write_tmp("# gold\ng1\t0\tsome text here\ng2\t1\ttab\tin text\n");
        let eval = EvalSet::from_tsv(&path, 2).unwrap();
        assert_eq!(eval.ids, vec!["g1", "g2"]);
        assert_eq!(eval.dataset.labels, vec![0, 1]);
        assert_eq!(eval.dataset.texts[1], "tab\tin text", "text keeps its own tabs");
        assert_eq!(eval.dataset.n_classes, 2);
        let (_dir2, path2) = write_tmp("g1\t0\n");
        assert!(matches!(
            EvalSet::from_tsv(&path2, 2).unwrap_err(),
            BootstrapError::BadRecord { line: 1, .. }
        ));
    }

    #[test]
    fn unlabeled_set_round_trips_and_rejects_duplicates() {
        let (_dir, path) = write_tmp("# texts\nx1\tsome words here\nx2\tmore words\n");
        let set = UnlabeledSet::from_tsv(&path).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.text_of("x2"), Some("more words"));
        assert_eq!(set.text_of("x9"), None);
        let err = UnlabeledSet::new(vec![
            ("a".into(), "t".into()),
            ("a".into(), "u".into()),
        ])
        .unwrap_err();
        assert!(matches!(err, BootstrapError::DuplicateId { line: 2, .. }));
    }

    fn toy_dataset(n: usize, k: usize) -> LabeledDataset {
        let texts = (0..n).map(|i| format!("word{} text", i % 7)).collect();
        let labels = (0..n).map(|i| i % k).collect();
        LabeledDataset::new(texts, labels, k).unwrap()
    }

    #[test]
    fn zero_probability_is_identity() {
        let data = toy_dataset(50, 4);
        let out = perturb_labels(&data, &NoiseSpec::new(0.0, 9, 4)).unwrap();
        assert_eq!(out.labels, data.labels);
        assert_eq!(out.texts, data.texts);
    }

    #[test]
    fn full_probability_changes_every_label() {
        let data = toy_dataset(200, 4);
        let out = perturb_labels(&data, &NoiseSpec::new(1.0, 9, 4)).unwrap();
        for (old, new) in data.labels.iter().zip(&out.labels) {
            assert_ne!(old, new, "replacement must differ from the original by construction");
        }
    }

    #[test]
    fn half_probability_changes_about_half_of_ten_thousand() {
        let data = toy_dataset(10_000, 4);
        let out = perturb_labels(&data, &NoiseSpec::new(0.5, 123, 4)).unwrap();
        let changed =
            data.labels.iter().zip(&out.labels).filter(|(a, b)| a != b).count() as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&changed), "changed fraction {changed}");
    }

    #[test]
    fn perturbation_is_deterministic_in_the_seed() {
        let data = toy_dataset(300, 3);
        let a = perturb_labels(&data, &NoiseSpec::new(0.4, 7, 3)).unwrap();
        let b = perturb_labels(&data, &NoiseSpec::new(0.4, 7, 3)).unwrap();
        let c = perturb_labels(&data, &NoiseSpec::new(0.4, 8, 3)).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_ne!(a.labels, c.labels);
    }

    #[test]
    fn out_of_range_probability_is_rejected() {
        let data = toy_dataset(5, 2);
        assert!(matches!(
            perturb_labels(&data, &NoiseSpec::new(-0.1, 1, 2)).unwrap_err(),
            BootstrapError::BadProbability(_)
        ));
        assert!(matches!(
            perturb_labels(&data, &NoiseSpec::new(1.5, 1, 2)).unwrap_err(),
            BootstrapError::BadProbability(_)
        ));
    }

    // ── bootstrap_train fixtures ─────────────────────────────────────

    fn keyword_examples(
        prefix: &str,
        n: usize,
        seed: u64,
    ) -> (Vec<String>, Vec<String>, Vec<usize>) {
        let fillers = ["one", "two", "three", "four", "five"];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids = Vec::new();
        let mut texts = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = i % 2;
            let mut words: Vec<&str> =
                (0..4).map(|_| fillers[rng.gen_range(0..fillers.len())]).collect();
            if label == 1 {
                let at = rng.gen_range(0..=words.len());
                words.insert(at, "apple");
            }
            ids.push(format!("{prefix}{i}"));
            texts.push(words.join(" "));
            labels.push(label);
        }
        (ids, texts, labels)
    }

    fn word_tokenizer(texts: &[String]) -> TokenizerModel {
        let opts = TrainOptions { target_vocab: 64, ..Default::default() };
        strategy("word").unwrap().train(texts, &opts).unwrap()
    }

    fn small_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            clf_batch: 6,
            clf_epochs: 3,
            lr_max: 1e-2,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn perfect_pseudo_labels_reduce_to_supervised_fine_tuning() {
        let (ids, texts, labels) = keyword_examples("tr", 24, 5);
        let (eval_ids, eval_texts, eval_labels) = keyword_examples("ev", 12, 6);
        let tok = word_tokenizer(&texts);
        let lm =
            build_language_model(&ModelConfig::tiny(tok.vocab_size(), 8, 12, 2), 3).unwrap();
        let cfg = small_cfg(77);

        let unlabeled = UnlabeledSet::new(
            ids.iter().cloned().zip(texts.iter().cloned()).collect(),
        )
        .unwrap();
        let pseudo = PseudoLabelSet {
            records: ids
                .iter()
                .zip(&labels)
                .map(|(id, &class)| PseudoRecord { id: id.clone(), class, confidence: 1.0 })
                .collect(),
            source: "oracle".into(),
            n_classes: 2,
        };
        let eval = EvalSet::new(
            eval_ids,
            LabeledDataset::new(eval_texts, eval_labels.clone(), 2).unwrap(),
        )
        .unwrap();

        let outcome =
            bootstrap_train(&lm, &tok, &unlabeled, &pseudo, &eval, &cfg, &mut NullObserver)
                .unwrap();

        let supervised_train = LabeledDataset::new(texts, labels, 2).unwrap();
        let (reference, ref_report) = finetune_classifier(
            &lm,
            &tok,
            &supervised_train,
            &eval.dataset,
            &cfg,
            &mut NullObserver,
        )
        .unwrap();
        for (name, tensor) in reference.params.iter() {
            assert_eq!(
                tensor.data(),
                outcome.classifier.params.get(name).unwrap().data(),
                "{name} must match the supervised run exactly"
            );
        }
        assert_eq!(outcome.student_accuracy, ref_report.best_val_accuracy);
        assert_eq!(outcome.trained_examples, 24);
        // The oracle teacher never labeled the eval ids, so its accuracy
        // has no denominator here.
        assert_eq!(outcome.teacher_accuracy, None);
    }

    #[test]
    fn teacher_accuracy_is_recomputed_against_gold() {
        let (ids, texts, labels) = keyword_examples("tr", 12, 9);
        let (eval_ids, eval_texts, eval_labels) = keyword_examples("ev", 4, 10);
        let tok = word_tokenizer(&texts);
        let lm =
            build_language_model(&ModelConfig::tiny(tok.vocab_size(), 8, 12, 2), 3).unwrap();
        let cfg = TrainConfig { clf_epochs: 1, ..small_cfg(5) };

        let unlabeled =
            UnlabeledSet::new(ids.iter().cloned().zip(texts.iter().cloned()).collect()).unwrap();
        // Teacher labels the training ids with gold and the eval ids with
        // 3-of-4 agreement; reported accuracy must be the recomputed 0.75,
        // no matter what the file claims elsewhere.
        let mut records: Vec<PseudoRecord> = ids
            .iter()
            .zip(&labels)
            .map(|(id, &class)| PseudoRecord { id: id.clone(), class, confidence: 1.0 })
            .collect();
        for (i, (id, &gold)) in eval_ids.iter().zip(&eval_labels).enumerate() {
            let class = if i == 0 { 1 - gold } else { gold };
            records.push(PseudoRecord { id: id.clone(), class, confidence: 0.5 });
        }
        let pseudo = PseudoLabelSet { records, source: "noisy".into(), n_classes: 2 };
        let eval = EvalSet::new(
            eval_ids,
            LabeledDataset::new(eval_texts, eval_labels, 2).unwrap(),
        )
        .unwrap();
        let outcome =
            bootstrap_train(&lm, &tok, &unlabeled, &pseudo, &eval, &cfg, &mut NullObserver)
                .unwrap();
        assert_eq!(outcome.teacher_accuracy, Some(0.75));
        // Eval ids are resolvable but never trained on.
        assert_eq!(outcome.trained_examples, 12);
    }

    #[test]
    fn unresolved_ids_error_lists_at_most_ten() {
        let (ids, texts, _) = keyword_examples("tr", 4, 2);
        let tok = word_tokenizer(&texts);
        let lm =
            build_language_model(&ModelConfig::tiny(tok.vocab_size(), 8, 12, 2), 3).unwrap();
        let unlabeled =
            UnlabeledSet::new(ids.iter().cloned().zip(texts.iter().cloned()).collect()).unwrap();
        let records = (0..12)
            .map(|i| PseudoRecord { id: format!("ghost{i}"), class: 0, confidence: 1.0 })
            .collect();
        let pseudo = PseudoLabelSet { records, source: "t".into(), n_classes: 2 };
        let (eval_ids, eval_texts, eval_labels) = keyword_examples("ev", 4, 3);
        let eval = EvalSet::new(
            eval_ids,
            LabeledDataset::new(eval_texts, eval_labels, 2).unwrap(),
        )
        .unwrap();
        let err = bootstrap_train(
            &lm,
            &tok,
            &unlabeled,
            &pseudo,
            &eval,
            &small_cfg(1),
            &mut NullObserver,
        )
        .err()
        .unwrap();
        match err {
            BootstrapError::UnresolvedIds { count, sample } => {
                assert_eq!(count, 12);
                assert_eq!(sample.len(), 10);
                assert_eq!(sample[0], "ghost0");
            }
            other => panic!("expected UnresolvedIds, got {other:?}"),
        }
    }

    #[test]
    fn empty_pseudo_set_is_rejected() {
        let (ids, texts, _) = keyword_examples("tr", 4, 2);
        let tok = word_tokenizer(&texts);
        let lm =
            build_language_model(&ModelConfig::tiny(tok.vocab_size(), 8, 12, 2), 3).unwrap();
        let unlabeled =
            UnlabeledSet::new(ids.iter().cloned().zip(texts.iter().cloned()).collect()).unwrap();
        let pseudo =
            PseudoLabelSet { records: Vec::new(), source: "t".into(), n_classes: 2 };
        let (eval_ids, eval_texts, eval_labels) = keyword_examples("ev", 4, 3);
        let eval = EvalSet::new(
            eval_ids.clone(),
            LabeledDataset::new(eval_texts, eval_labels, 2).unwrap(),
        )
        .unwrap();
        let err = bootstrap_train(
            &lm,
            &tok,
            &unlabeled,
            &pseudo,
            &eval,
            &small_cfg(1),
            &mut NullObserver,
        )
        .err()
        .unwrap();
        assert!(matches!(err, BootstrapError::EmptyPseudoSet));

        // Labels that resolve only to eval ids leave nothing to train on.
        let eval_only = PseudoLabelSet {
            records: eval_ids
                .iter()
                .map(|id| PseudoRecord { id: id.clone(), class: 0, confidence: 1.0 })
                .collect(),
            source: "t".into(),
            n_classes: 2,
        };
        let err2 = bootstrap_train(
            &lm,
            &tok,
            &unlabeled,
            &eval_only,
            &eval,
            &small_cfg(1),
            &mut NullObserver,
        )
        .err()
        .unwrap();
        assert!(matches!(err2, BootstrapError::EmptyPseudoSet));
    }

    #[test]
    fn noise_grid_outside_studied_range_is_rejected() {
        let data = toy_dataset(12, 2);
        let tok = word_tokenizer(&data.texts);
        let lm =
            build_language_model(&ModelConfig::tiny(tok.vocab_size(), 8, 12, 2), 3).unwrap();
        let err = noise_robustness_run(
            &lm,
            &tok,
            &data,
            &data,
            &[0.0, 0.9],
            &small_cfg(1),
            &mut NullObserver,
        )
        .unwrap_err();
        assert!(matches!(err, BootstrapError::BadProbability(p) if p == 0.9));
    }

    #[test]
    fn noise_rows_carry_baseline_and_render_as_tsv() {
        let (_, texts, labels) = keyword_examples("tr", 24, 31);
        let train = LabeledDataset::new(texts.clone(), labels, 2).unwrap();
        let (_, test_texts, test_labels) = keyword_examples("ev", 12, 32);
        let test = LabeledDataset::new(test_texts, test_labels, 2).unwrap();
        let tok = word_tokenizer(&texts);
        let lm =
            build_language_model(&ModelConfig::tiny(tok.vocab_size(), 8, 12, 2), 3).unwrap();
        let cfg = TrainConfig { clf_epochs: 1, ..small_cfg(3) };
        let rows =
            noise_robustness_run(&lm, &tok, &train, &test, &[0.0, 0.5], &cfg, &mut NullObserver)
                .unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].baseline, 1.0);
        assert_eq!(rows[1].baseline, 0.5);
        let table = noise_table_tsv(&rows);
        let mut lines = table.lines();
        assert_eq!(lines.next(), Some("#p\tacc_pretrained\tacc_random\tbaseline"));
        let first = lines.next().unwrap();
        assert!(first.starts_with("0\t"), "row: {first}");
        assert_eq!(first.split('\t').count(), 4);
    }
}
