//! Whitespace-and-punctuation word tokenizer: a frequency-truncated
//! whole-word vocabulary used as the baseline segmentation strategy.

use std::collections::HashMap;

use crate::error::TokenizerError;

use super::{SegmenterStrategy, Segmentation, TokenizerKind, TokenizerModel, TrainOptions};

/// Splits on whitespace, then detaches leading and trailing ASCII
/// punctuation as single-character tokens: "Hello, world!" becomes
/// ["Hello", ",", "world", "!"].
pub fn word_tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for raw in text.split_whitespace() {
        let chars: Vec<char> = raw.chars().collect();
        let mut lo = 0;
        let mut hi = chars.len();
        while lo < hi && chars[lo].is_ascii_punctuation() {
            lo += 1;
        }
        while hi > lo && chars[hi - 1].is_ascii_punctuation() {
            hi -= 1;
        }
        for &c in &chars[..lo] {
            tokens.push(c.to_string());
        }
        if lo < hi {
            tokens.push(chars[lo..hi].iter().collect());
        }
        for &c in &chars[hi..] {
            tokens.push(c.to_string());
        }
    }
    tokens
}

pub struct WordSegmenter;

impl SegmenterStrategy for WordSegmenter {
    fn name(&self) -> &'static str {
        "word"
    }

    fn train(&self, corpus: &[String], opts: &TrainOptions) -> Result<TokenizerModel, TokenizerError> {
        let mut counts: HashMap<String, f64> = HashMap::new();
        for line in corpus {
            for token in word_tokenize(line) {
                *counts.entry(token).or_insert(0.0) += 1.0;
            }
        }
        if counts.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }
        let mut by_freq: Vec<(String, f64)> = counts.into_iter().collect();
        by_freq.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        by_freq.truncate(opts.target_vocab);
        let kept: f64 = by_freq.iter().map(|(_, c)| c).sum();
        let content: Vec<(String, f64)> = by_freq
            .into_iter()
            .map(|(w, c)| (w, (c / kept).max(1e-300).ln()))
            .collect();
        TokenizerModel::from_content_pieces(TokenizerKind::Word, content, opts.char_coverage)
    }

    fn segment(&self, model: &TokenizerModel, text: &str) -> Segmentation {
        let mut ids = Vec::new();
        let mut log_prob = 0.0;
        for token in word_tokenize(text) {
            match model.piece_id(&token) {
                Some(id) if !model.is_special(id) => {
                    ids.push(id);
                    log_prob += model.pieces[id].log_prob;
                }
                _ => {
                    ids.push(model.unk);
                    log_prob += super::UNK_SCORE;
                }
            }
        }
        Segmentation { ids, log_prob }
    }
}
