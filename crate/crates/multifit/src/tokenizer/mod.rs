//! Subword and word tokenization.
//!
//! Two segmentation strategies live behind [`SegmenterStrategy`] and are
//! selected by name at runtime: `subword-unigram` (probabilistic pieces
//! trained by EM, decoded by Viterbi) and `word` (rule-based splitting with
//! a frequency-truncated vocabulary).
//!
//! Text is pre-split on whitespace; every word after the first in a line is
//! prefixed with the marker `▁` in place of the space, so decoding is a pure
//! concatenation followed by marker-to-space replacement. Ids 0–3 are the
//! specials `<unk>`, `<s>`, `</s>`, `<pad>`; trained content pieces follow.

pub mod unigram;
pub mod word;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::TokenizerError;

/// Marker standing in for the space before each non-initial word.
pub const WORD_MARKER: char = '\u{2581}';

/// Fixed score for an UNK lattice edge; constant so training likelihoods
/// shift by a constant and stay comparable across iterations.
pub const UNK_SCORE: f64 = -20.0;

pub const SPECIAL_TOKENS: [&str; 4] = ["<unk>", "<s>", "</s>", "<pad>"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenizerKind {
    SubwordUnigram,
    Word,
}

impl TokenizerKind {
    pub fn name(self) -> &'static str {
        match self {
            TokenizerKind::SubwordUnigram => "subword-unigram",
            TokenizerKind::Word => "word",
        }
    }

    pub fn parse(s: &str) -> Result<Self, TokenizerError> {
        match s {
            "subword-unigram" => Ok(TokenizerKind::SubwordUnigram),
            "word" => Ok(TokenizerKind::Word),
            other => Err(TokenizerError::UnknownKind(other.to_string())),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Piece {
    pub text: String,
    pub log_prob: f64,
}

/// A trained tokenizer: the full id space (specials then content pieces)
/// plus lookup structures rebuilt on load.
#[derive(Clone, Debug)]
pub struct TokenizerModel {
    pub kind: TokenizerKind,
    pub pieces: Vec<Piece>,
    pub char_coverage: f64,
    pub unk: usize,
    pub bos: usize,
    pub eos: usize,
    pub pad: usize,
    index: HashMap<String, usize>,
    max_piece_chars: usize,
}

/// Result of segmenting one text: piece ids and the summed piece log-prob.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub ids: Vec<usize>,
    pub log_prob: f64,
}

impl TokenizerModel {
    /// Assemble a model from content pieces (specials are prepended
    /// automatically with ids 0–3).
    pub fn from_content_pieces(
        kind: TokenizerKind,
        content: Vec<(String, f64)>,
        char_coverage: f64,
    ) -> Result<Self, TokenizerError> {
        let mut pieces = Vec::with_capacity(content.len() + 4);
        for (i, name) in SPECIAL_TOKENS.iter().enumerate() {
            pieces.push(Piece {
                text: name.to_string(),
                log_prob: if i == 0 { UNK_SCORE } else { 0.0 },
            });
        }
        for (text, log_prob) in content {
            pieces.push(Piece { text, log_prob });
        }
        Self::from_raw(kind, pieces, char_coverage, 0, 1, 2, 3)
    }

    /// Assemble from a fully explicit piece table (used by file loading).
    #[allow(clippy::too_many_arguments)]
    fn from_raw(
        kind: TokenizerKind,
        pieces: Vec<Piece>,
        char_coverage: f64,
        unk: usize,
        bos: usize,
        eos: usize,
        pad: usize,
    ) -> Result<Self, TokenizerError> {
        if !(char_coverage > 0.0 && char_coverage <= 1.0) {
            return Err(TokenizerError::BadModelFile {
                line: 0,
                what: format!("coverage {char_coverage} outside (0,1]"),
            });
        }
        let n = pieces.len();
        for (&id, name) in [unk, bos, eos, pad].iter().zip(["unk", "bos", "eos", "pad"]) {
            if id >= n {
                return Err(TokenizerError::BadModelFile {
                    line: 0,
                    what: format!("{name} id {id} out of range for {n} pieces"),
                });
            }
        }
        let mut index = HashMap::with_capacity(n);
        let mut max_piece_chars = 1;
        let mut prob_sum = 0.0;
        for (id, piece) in pieces.iter().enumerate() {
            if piece.text.is_empty() {
                return Err(TokenizerError::BadModelFile {
                    line: 0,
                    what: format!("piece {id} is empty"),
                });
            }
            if piece.log_prob > 1e-9 {
                return Err(TokenizerError::BadModelFile {
                    line: 0,
                    what: format!("piece {id} has positive log-prob {}", piece.log_prob),
                });
            }
            if index.insert(piece.text.clone(), id).is_some() {
                return Err(TokenizerError::BadModelFile {
                    line: 0,
                    what: format!("duplicate piece '{}'", piece.text),
                });
            }
            if ![unk, bos, eos, pad].contains(&id) {
                max_piece_chars = max_piece_chars.max(piece.text.chars().count());
                prob_sum += piece.log_prob.exp();
            }
        }
        if n > 4 && (prob_sum - 1.0).abs() > 1e-6 {
            return Err(TokenizerError::BadModelFile {
                line: 0,
                what: format!("piece probabilities sum to {prob_sum}, expected 1"),
            });
        }
        Ok(TokenizerModel {
            kind,
            pieces,
            char_coverage,
            unk,
            bos,
            eos,
            pad,
            index,
            max_piece_chars,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    /// Number of trained (non-special) pieces.
    pub fn content_size(&self) -> usize {
        self.pieces.len() - 4
    }

    pub fn piece_id(&self, text: &str) -> Option<usize> {
        self.index.get(text).copied()
    }

    pub fn piece_text(&self, id: usize) -> Option<&str> {
        self.pieces.get(id).map(|p| p.text.as_str())
    }

    pub fn is_special(&self, id: usize) -> bool {
        id == self.unk || id == self.bos || id == self.eos || id == self.pad
    }

    pub(crate) fn max_piece_chars(&self) -> usize {
        self.max_piece_chars
    }

    /// Set of characters representable without UNK: every character that
    /// appears in some single-character content piece (plus the marker).
    pub fn covered_chars(&self) -> std::collections::HashSet<char> {
        let mut set = std::collections::HashSet::new();
        for (id, piece) in self.pieces.iter().enumerate() {
            if self.is_special(id) {
                continue;
            }
            let mut chars = piece.text.chars();
            if let (Some(c), None) = (chars.next(), chars.next()) {
                set.insert(c);
            }
        }
        set
    }

    /// Split a line into lattice words: the first word bare, every later
    /// word prefixed with the marker.
    pub fn mark_words(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for w in text.split_whitespace() {
            if out.is_empty() {
                out.push(w.to_string());
            } else {
                let mut marked = String::with_capacity(w.len() + 3);
                marked.push(WORD_MARKER);
                marked.push_str(w);
                out.push(marked);
            }
        }
        out
    }

    /// Segment a text into piece ids using this model's strategy.
    pub fn segment(&self, text: &str) -> Segmentation {
        strategy(self.kind.name())
            .expect("registered kinds always resolve")
            .segment(self, text)
    }

    /// Invert segmentation: concatenate pieces and turn markers back into
    /// spaces. For the word strategy, pieces join with single spaces.
    pub fn decode(&self, ids: &[usize]) -> Result<String, TokenizerError> {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            let piece = self.pieces.get(id).ok_or(TokenizerError::IdOutOfRange {
                id,
                vocab: self.pieces.len(),
            })?;
            if self.kind == TokenizerKind::Word && i > 0 {
                out.push(' ');
            }
            out.push_str(&piece.text);
        }
        if self.kind == TokenizerKind::SubwordUnigram {
            out = out.replace(WORD_MARKER, " ");
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let mut body = String::new();
        let _ = writeln!(body, "#kind={}", self.kind.name());
        let _ = writeln!(body, "#coverage={}", self.char_coverage);
        let _ = writeln!(body, "#unk={}", self.unk);
        let _ = writeln!(body, "#bos={}", self.bos);
        let _ = writeln!(body, "#eos={}", self.eos);
        let _ = writeln!(body, "#pad={}", self.pad);
        for piece in &self.pieces {
            let _ = writeln!(body, "{}\t{}", piece.text, piece.log_prob);
        }
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let raw = std::fs::read_to_string(path)?;
        let mut kind = None;
        let mut coverage = None;
        let mut ids = [None; 4]; // unk, bos, eos, pad
        let mut pieces = Vec::new();
        for (i, line) in raw.lines().enumerate() {
            let lineno = i + 1;
            if let Some(rest) = line.strip_prefix('#') {
                let (key, value) = rest.split_once('=').ok_or(TokenizerError::BadModelFile {
                    line: lineno,
                    what: format!("header '{line}' missing '='"),
                })?;
                let parse_id = |v: &str| {
                    v.parse::<usize>().map_err(|_| TokenizerError::BadModelFile {
                        line: lineno,
                        what: format!("id '{v}' is not a non-negative integer"),
                    })
                };
                match key {
                    "kind" => kind = Some(TokenizerKind::parse(value)?),
                    "coverage" => {
                        coverage =
                            Some(value.parse::<f64>().map_err(|_| TokenizerError::BadModelFile {
                                line: lineno,
                                what: format!("coverage '{value}' is not a number"),
                            })?)
                    }
                    "unk" => ids[0] = Some(parse_id(value)?),
                    "bos" => ids[1] = Some(parse_id(value)?),
                    "eos" => ids[2] = Some(parse_id(value)?),
                    "pad" => ids[3] = Some(parse_id(value)?),
                    other => {
                        return Err(TokenizerError::BadModelFile {
                            line: lineno,
                            what: format!("unknown header '{other}'"),
                        })
                    }
                }
            } else if !line.is_empty() {
                let (text, lp) = line.split_once('\t').ok_or(TokenizerError::BadModelFile {
                    line: lineno,
                    what: "expected '<piece>\\t<log_prob>'".into(),
                })?;
                let log_prob = lp.parse::<f64>().map_err(|_| TokenizerError::BadModelFile {
                    line: lineno,
                    what: format!("log_prob '{lp}' is not a number"),
                })?;
                pieces.push(Piece { text: text.to_string(), log_prob });
            }
        }
        let kind = kind.ok_or(TokenizerError::BadModelFile { line: 0, what: "missing #kind header".into() })?;
        let coverage = coverage
            .ok_or(TokenizerError::BadModelFile { line: 0, what: "missing #coverage header".into() })?;
        let [unk, bos, eos, pad] = ids;
        let need = |o: Option<usize>, name: &str| {
            o.ok_or(TokenizerError::BadModelFile { line: 0, what: format!("missing #{name} header") })
        };
        Self::from_raw(
            kind,
            pieces,
            coverage,
            need(unk, "unk")?,
            need(bos, "bos")?,
            need(eos, "eos")?,
            need(pad, "pad")?,
        )
    }
}

/// Training knobs for both strategies.
#[derive(Clone, Debug)]
pub struct TrainOptions {
    /// Content pieces to keep (specials are stored on top of this).
    pub target_vocab: usize,
    pub char_coverage: f64,
    /// Seed vocabulary size cap as a multiple of `target_vocab`.
    pub seed_multiplier: usize,
    pub max_piece_len: usize,
    pub em_iters_initial: usize,
    pub em_iters_per_round: usize,
    pub prune_fraction: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            target_vocab: 15_000,
            char_coverage: 1.0,
            seed_multiplier: 4,
            max_piece_len: 16,
            em_iters_initial: 4,
            em_iters_per_round: 2,
            prune_fraction: 0.2,
        }
    }
}

/// A segmentation algorithm selectable by name.
pub trait SegmenterStrategy: Sync {
    fn name(&self) -> &'static str;
    fn train(&self, corpus: &[String], opts: &TrainOptions) -> Result<TokenizerModel, TokenizerError>;
    fn segment(&self, model: &TokenizerModel, text: &str) -> Segmentation;
}

static SEGMENTERS: &[&dyn SegmenterStrategy] =
    &[&unigram::UnigramSegmenter, &word::WordSegmenter];

/// Look up a strategy by its registered name.
pub fn strategy(name: &str) -> Result<&'static dyn SegmenterStrategy, TokenizerError> {
    SEGMENTERS
        .iter()
        .find(|s| s.name() == name)
        .copied()
        .ok_or_else(|| TokenizerError::UnknownKind(name.to_string()))
}

/// Names of all registered strategies.
pub fn strategy_names() -> Vec<&'static str> {
    SEGMENTERS.iter().map(|s| s.name()).collect()
}
