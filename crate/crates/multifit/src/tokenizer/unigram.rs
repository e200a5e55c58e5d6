//! Unigram-LM subword tokenizer: seed vocabulary from frequent substrings,
//! EM over segmentation lattices, likelihood-guided pruning, and Viterbi
//! decoding with a deterministic tie-break.

use std::collections::HashMap;

use crate::error::TokenizerError;

use super::{
    SegmenterStrategy, Segmentation, TokenizerKind, TokenizerModel, TrainOptions, UNK_SCORE,
};

pub struct UnigramSegmenter;

impl SegmenterStrategy for UnigramSegmenter {
    fn name(&self) -> &'static str {
        "subword-unigram"
    }

    fn train(&self, corpus: &[String], opts: &TrainOptions) -> Result<TokenizerModel, TokenizerError> {
        train_unigram(corpus, opts).map(|(model, _)| model)
    }

    fn segment(&self, model: &TokenizerModel, text: &str) -> Segmentation {
        let mut ids = Vec::new();
        let mut log_prob = 0.0;
        for word in TokenizerModel::mark_words(text) {
            let (word_ids, word_lp) = viterbi_word(model, &word);
            ids.extend(word_ids);
            log_prob += word_lp;
        }
        Segmentation { ids, log_prob }
    }
}

/// Per-EM-phase corpus log-likelihood traces; each inner vector is one
/// uninterrupted run of EM iterations (pruning happens between phases).
#[derive(Clone, Debug, Default)]
pub struct EmTrace {
    pub phases: Vec<Vec<f64>>,
}

/// One unique whitespace-delimited word with its corpus frequency.
struct WordEntry {
    chars: Vec<char>,
    count: f64,
}

/// A lattice edge: piece `piece` spans character positions `[start, end)`.
/// `piece == UNK_EDGE` marks a forced single-character UNK.
#[derive(Clone, Copy)]
struct Edge {
    start: u32,
    end: u32,
    piece: u32,
}

const UNK_EDGE: u32 = u32::MAX;

/// Train a unigram tokenizer and return the model together with the
/// per-iteration likelihood trace (used by monotonicity checks).
pub fn train_unigram(
    corpus: &[String],
    opts: &TrainOptions,
) -> Result<(TokenizerModel, EmTrace), TokenizerError> {
    let words = collect_words(corpus)?;
    let covered = covered_chars(&words, opts.char_coverage);

    let floor = covered.len() + super::SPECIAL_TOKENS.len();
    if opts.target_vocab < floor {
        return Err(TokenizerError::VocabBelowFloor { target: opts.target_vocab, floor });
    }

    // Seed vocabulary: all covered single characters, plus the most frequent
    // multi-character substrings scored by count x length.
    let (mut piece_texts, single_count) = seed_vocabulary(&words, &covered, opts);
    let mut probs = initial_probs(&words, &piece_texts);
    let mut alive = vec![true; piece_texts.len()];

    // Lattices are built once against the seed vocabulary; pruning only
    // flips pieces dead, so edges stay valid for the whole run.
    let piece_ids: HashMap<&str, u32> = piece_texts
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i as u32))
        .collect();
    let lattices: Vec<Vec<Edge>> = words
        .iter()
        .map(|w| build_lattice(&w.chars, &piece_ids, &covered, opts.max_piece_len))
        .collect();
    // Which words mention each piece (for cheap pruning impact).
    let mut piece_words: Vec<Vec<u32>> = vec![Vec::new(); piece_texts.len()];
    for (wi, edges) in lattices.iter().enumerate() {
        for e in edges {
            if e.piece != UNK_EDGE {
                let list = &mut piece_words[e.piece as usize];
                if list.last() != Some(&(wi as u32)) {
                    list.push(wi as u32);
                }
            }
        }
    }

    let mut trace = EmTrace::default();
    trace.phases.push(run_em(
        &words,
        &lattices,
        &mut probs,
        &alive,
        opts.em_iters_initial,
    ));

    // Prune the least useful multi-character pieces until the content
    // vocabulary is exactly the target. Single characters and pieces the
    // corpus never uses in isolation stay put.
    loop {
        let alive_count = alive.iter().filter(|&&a| a).count();
        if alive_count <= opts.target_vocab {
            break;
        }
        let base_ll: Vec<f64> = lattices
            .iter()
            .map(|edges| forward_ll(edges, &probs, &alive, u32::MAX))
            .collect();
        let mut impacts: Vec<(f64, u32)> = Vec::new();
        for pi in single_count..piece_texts.len() {
            if !alive[pi] {
                continue;
            }
            let mut delta = 0.0;
            for &wi in &piece_words[pi] {
                let masked = forward_ll(&lattices[wi as usize], &probs, &alive, pi as u32);
                delta += words[wi as usize].count * (base_ll[wi as usize] - masked);
            }
            impacts.push((delta, pi as u32));
        }
        if impacts.is_empty() {
            break;
        }
        impacts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let removable = alive_count - opts.target_vocab;
        let batch = ((impacts.len() as f64 * opts.prune_fraction).ceil() as usize)
            .max(1)
            .min(removable);
        for &(_, pi) in impacts.iter().take(batch) {
            alive[pi as usize] = false;
            probs[pi as usize] = 0.0;
        }
        renormalize(&mut probs, &alive);
        trace.phases.push(run_em(
            &words,
            &lattices,
            &mut probs,
            &alive,
            opts.em_iters_per_round,
        ));
    }

    // Deterministic final ordering: by probability descending, then text.
    let mut content: Vec<(String, f64)> = piece_texts
        .drain(..)
        .zip(probs.iter())
        .zip(alive.iter())
        .filter(|(_, &a)| a)
        .map(|((text, &p), _)| (text, p))
        .collect();
    content.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let total: f64 = content.iter().map(|(_, p)| p).sum();
    let content: Vec<(String, f64)> = content
        .into_iter()
        .map(|(text, p)| (text, (p / total).max(1e-300).ln()))
        .collect();
    let model =
        TokenizerModel::from_content_pieces(TokenizerKind::SubwordUnigram, content, opts.char_coverage)?;
    Ok((model, trace))
}

fn collect_words(corpus: &[String]) -> Result<Vec<WordEntry>, TokenizerError> {
    let mut counts: HashMap<String, f64> = HashMap::new();
    for line in corpus {
        for word in TokenizerModel::mark_words(line) {
            *counts.entry(word).or_insert(0.0) += 1.0;
        }
    }
    if counts.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut words: Vec<WordEntry> = counts
        .into_iter()
        .map(|(w, count)| WordEntry { chars: w.chars().collect(), count })
        .collect();
    // Deterministic order regardless of hash-map iteration.
    words.sort_by(|a, b| a.chars.cmp(&b.chars));
    Ok(words)
}

/// Most frequent characters covering at least `coverage` of all character
/// occurrences.
fn covered_chars(words: &[WordEntry], coverage: f64) -> std::collections::HashSet<char> {
    let mut freq: HashMap<char, f64> = HashMap::new();
    let mut total = 0.0;
    for w in words {
        for &c in &w.chars {
            *freq.entry(c).or_insert(0.0) += w.count;
            total += w.count;
        }
    }
    let mut by_freq: Vec<(char, f64)> = freq.into_iter().collect();
    by_freq.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut covered = std::collections::HashSet::new();
    let mut seen = 0.0;
    for (c, n) in by_freq {
        if seen / total >= coverage {
            break;
        }
        covered.insert(c);
        seen += n;
    }
    covered
}

/// Returns (piece texts with singles first, number of single-char pieces).
fn seed_vocabulary(
    words: &[WordEntry],
    covered: &std::collections::HashSet<char>,
    opts: &TrainOptions,
) -> (Vec<String>, usize) {
    let mut singles: Vec<String> = covered.iter().map(|c| c.to_string()).collect();
    singles.sort();
    let single_count = singles.len();

    let mut substr_counts: HashMap<String, f64> = HashMap::new();
    for w in words {
        let n = w.chars.len();
        for i in 0..n {
            if !covered.contains(&w.chars[i]) {
                continue;
            }
            let mut s = String::new();
            for j in i..n.min(i + opts.max_piece_len) {
                if !covered.contains(&w.chars[j]) {
                    break;
                }
                s.push(w.chars[j]);
                if j > i {
                    *substr_counts.entry(s.clone()).or_insert(0.0) += w.count;
                }
            }
        }
    }
    let budget = (opts.seed_multiplier * opts.target_vocab).saturating_sub(single_count);
    let mut multis: Vec<(String, f64)> = substr_counts
        .into_iter()
        .map(|(s, c)| {
            let len = s.chars().count() as f64;
            (s, c * len)
        })
        .collect();
    multis.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    multis.truncate(budget);

    let mut pieces = singles;
    pieces.extend(multis.into_iter().map(|(s, _)| s));
    (pieces, single_count)
}

/// Seed probabilities proportional to raw substring frequency.
fn initial_probs(words: &[WordEntry], pieces: &[String]) -> Vec<f64> {
    let index: HashMap<&str, usize> =
        pieces.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut counts = vec![0.0; pieces.len()];
    let max_len = pieces.iter().map(|p| p.chars().count()).max().unwrap_or(1);
    for w in words {
        let n = w.chars.len();
        for i in 0..n {
            let mut s = String::new();
            for j in i..n.min(i + max_len) {
                s.push(w.chars[j]);
                if let Some(&pi) = index.get(s.as_str()) {
                    counts[pi] += w.count;
                }
            }
        }
    }
    let total: f64 = counts.iter().sum();
    counts.iter_mut().for_each(|c| *c = (*c / total).max(1e-300));
    counts
}

/// All in-vocabulary edges over a word, plus UNK edges for uncovered chars.
fn build_lattice(
    chars: &[char],
    piece_ids: &HashMap<&str, u32>,
    covered: &std::collections::HashSet<char>,
    max_piece_len: usize,
) -> Vec<Edge> {
    let n = chars.len();
    let mut edges = Vec::new();
    for i in 0..n {
        if !covered.contains(&chars[i]) {
            edges.push(Edge { start: i as u32, end: (i + 1) as u32, piece: UNK_EDGE });
            continue;
        }
        let mut s = String::new();
        for j in i..n.min(i + max_piece_len) {
            if !covered.contains(&chars[j]) {
                break;
            }
            s.push(chars[j]);
            if let Some(&pi) = piece_ids.get(s.as_str()) {
                edges.push(Edge { start: i as u32, end: (j + 1) as u32, piece: pi });
            }
        }
    }
    edges
}

fn logsumexp2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn edge_logp(e: &Edge, probs: &[f64], alive: &[bool], masked: u32) -> Option<f64> {
    if e.piece == UNK_EDGE {
        return Some(UNK_SCORE);
    }
    let pi = e.piece as usize;
    if !alive[pi] || e.piece == masked {
        return None;
    }
    Some(probs[pi].ln())
}

/// Log-likelihood of one word's lattice with `masked` excluded.
fn forward_ll(edges: &[Edge], probs: &[f64], alive: &[bool], masked: u32) -> f64 {
    let n = edges.iter().map(|e| e.end).max().unwrap_or(0) as usize;
    let mut alpha = vec![f64::NEG_INFINITY; n + 1];
    alpha[0] = 0.0;
    for e in edges {
        if let Some(lp) = edge_logp(e, probs, alive, masked) {
            let cand = alpha[e.start as usize] + lp;
            alpha[e.end as usize] = logsumexp2(alpha[e.end as usize], cand);
        }
    }
    alpha[n]
}

/// EM iterations over fixed lattices. Returns the corpus log-likelihood
/// evaluated at the parameters in force during each E-step.
fn run_em(
    words: &[WordEntry],
    lattices: &[Vec<Edge>],
    probs: &mut Vec<f64>,
    alive: &[bool],
    iters: usize,
) -> Vec<f64> {
    let mut lls = Vec::with_capacity(iters);
    for _ in 0..iters {
        let mut expected = vec![0.0; probs.len()];
        let mut ll = 0.0;
        for (w, edges) in words.iter().zip(lattices) {
            let n = w.chars.len();
            let mut alpha = vec![f64::NEG_INFINITY; n + 1];
            let mut beta = vec![f64::NEG_INFINITY; n + 1];
            alpha[0] = 0.0;
            beta[n] = 0.0;
            for e in edges {
                if let Some(lp) = edge_logp(e, probs, alive, u32::MAX) {
                    let cand = alpha[e.start as usize] + lp;
                    alpha[e.end as usize] = logsumexp2(alpha[e.end as usize], cand);
                }
            }
            for e in edges.iter().rev() {
                if let Some(lp) = edge_logp(e, probs, alive, u32::MAX) {
                    let cand = beta[e.end as usize] + lp;
                    beta[e.start as usize] = logsumexp2(beta[e.start as usize], cand);
                }
            }
            let z = alpha[n];
            ll += w.count * z;
            for e in edges {
                if e.piece == UNK_EDGE {
                    continue;
                }
                if let Some(lp) = edge_logp(e, probs, alive, u32::MAX) {
                    let posterior =
                        (alpha[e.start as usize] + lp + beta[e.end as usize] - z).exp();
                    expected[e.piece as usize] += w.count * posterior;
                }
            }
        }
        // Plain maximum-likelihood M-step: normalized expected counts. This
        // is what makes the per-iteration likelihood non-decreasing.
        let total: f64 = expected.iter().sum();
        for (pi, e) in expected.iter().enumerate() {
            if alive[pi] {
                probs[pi] = (e / total).max(1e-300);
            }
        }
        lls.push(ll);
    }
    lls
}

fn renormalize(probs: &mut [f64], alive: &[bool]) {
    let total: f64 = probs.iter().zip(alive).filter(|(_, &a)| a).map(|(p, _)| p).sum();
    for (p, &a) in probs.iter_mut().zip(alive) {
        if a {
            *p /= total;
        }
    }
}

/// Viterbi over one marked word. Ties break toward fewer pieces, then the
/// lexicographically smallest piece-string sequence; both comparisons use
/// exact equality so the result is deterministic.
pub(crate) fn viterbi_word(model: &TokenizerModel, word: &str) -> (Vec<usize>, f64) {
    let chars: Vec<char> = word.chars().collect();
    let n = chars.len();
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    let covered = model.covered_chars();
    let max_len = model.max_piece_chars();

    #[derive(Clone)]
    struct Cell {
        log_prob: f64,
        pieces: usize,
        path: Vec<usize>,
    }
    let mut dp: Vec<Option<Cell>> = vec![None; n + 1];
    dp[0] = Some(Cell { log_prob: 0.0, pieces: 0, path: Vec::new() });

    let better = |cand: &Cell, cur: &Cell, model: &TokenizerModel| -> bool {
        if cand.log_prob != cur.log_prob {
            return cand.log_prob > cur.log_prob;
        }
        if cand.pieces != cur.pieces {
            return cand.pieces < cur.pieces;
        }
        let to_text = |path: &[usize]| -> Vec<&str> {
            path.iter().map(|&id| model.piece_text(id).unwrap_or("")).collect()
        };
        to_text(&cand.path) < to_text(&cur.path)
    };

    for i in 0..n {
        let Some(base) = dp[i].clone() else { continue };
        if !covered.contains(&chars[i]) {
            let mut path = base.path.clone();
            path.push(model.unk);
            let cand = Cell { log_prob: base.log_prob + UNK_SCORE, pieces: base.pieces + 1, path };
            if dp[i + 1].as_ref().map_or(true, |cur| better(&cand, cur, model)) {
                dp[i + 1] = Some(cand);
            }
            continue;
        }
        let mut s = String::new();
        for j in i..n.min(i + max_len) {
            if !covered.contains(&chars[j]) {
                break;
            }
            s.push(chars[j]);
            if let Some(id) = model.piece_id(&s) {
                if model.is_special(id) {
                    continue;
                }
                let mut path = base.path.clone();
                path.push(id);
                let cand = Cell {
                    log_prob: base.log_prob + model.pieces[id].log_prob,
                    pieces: base.pieces + 1,
                    path,
                };
                if dp[j + 1].as_ref().map_or(true, |cur| better(&cand, cur, model)) {
                    dp[j + 1] = Some(cand);
                }
            }
        }
    }
    let last = dp[n].take().expect("covered singles or UNK edges always span the word");
    (last.path, last.log_prob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::WORD_MARKER;

    fn model_from(content: Vec<(&str, f64)>) -> TokenizerModel {
        TokenizerModel::from_content_pieces(
            TokenizerKind::SubwordUnigram,
            content.into_iter().map(|(s, p)| (s.to_string(), p.ln())).collect(),
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn single_piece_beats_two_piece_path_when_more_probable() {
        // log 0.2 > log 0.5 + log 0.3.
        let model = model_from(vec![("a", 0.5), ("b", 0.3), ("ab", 0.2)]);
        let seg = model.segment("ab");
        assert_eq!(seg.ids, vec![model.piece_id("ab").unwrap()]);
        assert!((seg.log_prob - 0.2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_string_segments_to_nothing() {
        let model = model_from(vec![("a", 0.6), ("b", 0.4)]);
        let seg = model.segment("");
        assert!(seg.ids.is_empty());
        assert_eq!(seg.log_prob, 0.0);
    }

    #[test]
    fn single_char_vocab_forces_per_character_pieces() {
        let model = model_from(vec![("a", 0.5), ("b", 0.3), ("c", 0.2)]);
        let seg = model.segment("cab");
        let ids: Vec<usize> =
            ["c", "a", "b"].iter().map(|s| model.piece_id(s).unwrap()).collect();
        assert_eq!(seg.ids, ids);
    }

    #[test]
    fn uncovered_characters_become_unk() {
        let model = model_from(vec![("a", 0.7), ("b", 0.3)]);
        let seg = model.segment("axb");
        assert_eq!(seg.ids[1], model.unk);
        assert_eq!(seg.ids.len(), 3);
    }

    /// Builds a model from explicit log-probabilities so ties are exact by
    /// construction (derived from f64 additions, not parallel ln calls).
    fn model_from_logs(content: Vec<(&str, f64)>) -> TokenizerModel {
        TokenizerModel::from_content_pieces(
            TokenizerKind::SubwordUnigram,
            content.into_iter().map(|(s, lp)| (s.to_string(), lp)).collect(),
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn exact_log_prob_tie_prefers_fewer_pieces() {
        let la = 0.25f64.ln();
        let lab = la + la; // exactly the log-prob of the path [a, b]
        let rest = 1.0 - 0.25 - 0.25 - 2.0 * lab.exp();
        let model = model_from_logs(vec![
            ("a", la),
            ("b", la),
            ("ab", lab),
            ("ba", lab),
            ("z", rest.ln()),
        ]);
        let seg = model.segment("ab");
        assert_eq!(seg.ids, vec![model.piece_id("ab").unwrap()]);
        assert_eq!(seg.log_prob, lab);
    }

    #[test]
    fn exact_tie_at_equal_length_prefers_lexicographic_pieces() {
        // "abc" as [a, bc] or [ab, c]: same piece count, identical log-prob
        // because every piece shares one log-probability. "a" < "ab".
        let l = 0.15f64.ln();
        let rest: f64 = 1.0 - 5.0 * 0.15;
        let model = model_from_logs(vec![
            ("a", l),
            ("b", l),
            ("c", l),
            ("ab", l),
            ("bc", l),
            ("z", rest.ln()),
        ]);
        let seg = model.segment("abc");
        let want =
            vec![model.piece_id("a").unwrap(), model.piece_id("bc").unwrap()];
        assert_eq!(seg.ids, want);
    }

    #[test]
    fn viterbi_matches_brute_force_on_short_strings() {
        let model = model_from(vec![
            ("a", 0.3),
            ("b", 0.2),
            ("ab", 0.15),
            ("ba", 0.1),
            ("aa", 0.1),
            ("bb", 0.05),
            ("aba", 0.1),
        ]);
        let alphabet = ['a', 'b'];
        for len in 0..=6 {
            let mut idx = vec![0usize; len];
            loop {
                let s: String = idx.iter().map(|&i| alphabet[i]).collect();
                let seg = model.segment(&s);
                let best = brute_force(&model, &s);
                match best {
                    Some((lp, path)) => {
                        assert!(
                            (seg.log_prob - lp).abs() < 1e-12,
                            "'{s}': viterbi {} vs brute {lp}",
                            seg.log_prob
                        );
                        assert_eq!(seg.ids, path, "'{s}' tie-break mismatch");
                    }
                    None => panic!("brute force found no segmentation for '{s}'"),
                }
                // Advance the odometer.
                let mut k = 0;
                loop {
                    if k == len {
                        break;
                    }
                    idx[k] += 1;
                    if idx[k] < alphabet.len() {
                        break;
                    }
                    idx[k] = 0;
                    k += 1;
                }
                if k == len {
                    break;
                }
            }
            if len == 0 {
                continue;
            }
        }
    }

    /// Exhaustive best segmentation with the same tie-break.
    fn brute_force(model: &TokenizerModel, s: &str) -> Option<(f64, Vec<usize>)> {
        let chars: Vec<char> = s.chars().collect();
        if chars.is_empty() {
            return Some((0.0, Vec::new()));
        }
        let mut all: Vec<(f64, Vec<usize>)> = Vec::new();
        let mut stack: Vec<(usize, f64, Vec<usize>)> = vec![(0, 0.0, Vec::new())];
        while let Some((pos, lp, path)) = stack.pop() {
            if pos == chars.len() {
                all.push((lp, path));
                continue;
            }
            for end in pos + 1..=chars.len() {
                let sub: String = chars[pos..end].iter().collect();
                if let Some(id) = model.piece_id(&sub) {
                    if !model.is_special(id) {
                        let mut p = path.clone();
                        p.push(id);
                        stack.push((end, lp + model.pieces[id].log_prob, p));
                    }
                }
            }
        }
        all.into_iter().min_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| a.1.len().cmp(&b.1.len()))
                .then_with(|| {
                    let ta: Vec<&str> = a.1.iter().map(|&i| model.piece_text(i).unwrap()).collect();
                    let tb: Vec<&str> = b.1.iter().map(|&i| model.piece_text(i).unwrap()).collect();
                    ta.cmp(&tb)
                })
        })
    }

    #[test]
    fn training_on_repeated_abab_keeps_ab_with_high_probability() {
        let corpus: Vec<String> = vec!["abab".to_string(); 50];
        let opts = TrainOptions {
            target_vocab: 6,
            char_coverage: 1.0,
            ..TrainOptions::default()
        };
        let (model, trace) = train_unigram(&corpus, &opts).unwrap();
        assert_eq!(model.content_size(), 6);
        let ab = model.piece_id("ab").expect("piece 'ab' must survive pruning");
        let a = model.piece_id("a").unwrap();
        let b = model.piece_id("b").unwrap();
        assert!(
            model.pieces[ab].log_prob > model.pieces[a].log_prob + model.pieces[b].log_prob,
            "p(ab) must beat the a+b path"
        );
        // Likelihood never decreases within an EM phase.
        for phase in &trace.phases {
            for pair in phase.windows(2) {
                assert!(pair[1] >= pair[0] - 1e-9, "EM likelihood dropped: {pair:?}");
            }
        }
        // The model segments its own corpus with compound pieces, not
        // one id per character.
        let seg = model.segment("abab");
        assert!(seg.ids.len() < 4, "expected multi-char pieces, got {:?}", seg.ids);
    }

    #[test]
    fn full_coverage_leaves_no_unk_in_corpus() {
        let corpus: Vec<String> =
            vec!["the cat sat".to_string(), "the bat sat".to_string(), "a cat".to_string()];
        let opts = TrainOptions { target_vocab: 40, ..TrainOptions::default() };
        let (model, _) = train_unigram(&corpus, &opts).unwrap();
        for line in &corpus {
            let seg = model.segment(line);
            assert!(!seg.ids.contains(&model.unk), "UNK appeared under full coverage");
        }
    }

    #[test]
    fn target_below_floor_is_rejected_naming_the_floor() {
        let corpus = vec!["abcdef".to_string()];
        let opts = TrainOptions { target_vocab: 5, ..TrainOptions::default() };
        let err = train_unigram(&corpus, &opts).unwrap_err();
        match err {
            TokenizerError::VocabBelowFloor { target: 5, floor } => {
                assert_eq!(floor, 6 + 4); // six characters plus four specials
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let corpus = vec!["   ".to_string()];
        let err = train_unigram(&corpus, &TrainOptions::default()).unwrap_err();
        assert!(matches!(err, TokenizerError::EmptyCorpus));
    }

    #[test]
    fn partial_coverage_maps_rare_chars_to_unk_within_budget() {
        // 'z' is rare; coverage 0.95 should drop it and nothing common.
        let mut corpus: Vec<String> = vec!["aaaa bbbb cccc dddd".to_string(); 30];
        corpus.push("az".to_string());
        let opts = TrainOptions { target_vocab: 30, char_coverage: 0.95, ..TrainOptions::default() };
        let (model, _) = train_unigram(&corpus, &opts).unwrap();
        let mut unk_chars = 0usize;
        let mut total_chars = 0usize;
        for line in &corpus {
            for word in TokenizerModel::mark_words(line) {
                let n = word.chars().count();
                total_chars += n;
                let seg = model.segment(&word);
                unk_chars += seg.ids.iter().filter(|&&id| id == model.unk).count();
            }
        }
        let frac = unk_chars as f64 / total_chars as f64;
        assert!(frac <= (1.0 - 0.95) + 1e-6, "UNK fraction {frac} exceeds coverage budget");
        assert!(model.piece_id("z").is_none());
    }

    proptest::proptest! {
        #[test]
        fn covered_text_always_round_trips(
            words in proptest::collection::vec("[abcd]{1,8}", 1..6)
        ) {
            let model = model_from(vec![
                ("a", 0.24),
                ("b", 0.24),
                ("c", 0.24),
                ("d", 0.24),
                (Box::leak(WORD_MARKER.to_string().into_boxed_str()), 0.04),
            ]);
            let text = words.join(" ");
            let seg = model.segment(&text);
            proptest::prop_assert_eq!(model.decode(&seg.ids).unwrap(), text);
        }
    }

    #[test]
    fn marked_words_round_trip_through_decode() {
        let corpus: Vec<String> = vec!["hello world".to_string(), "world of words".to_string()];
        let opts = TrainOptions { target_vocab: 40, ..TrainOptions::default() };
        let (model, _) = train_unigram(&corpus, &opts).unwrap();
        for text in ["hello world", "world world", "of words", "hello"] {
            let seg = model.segment(text);
            assert_eq!(model.decode(&seg.ids).unwrap(), text);
        }
        assert!(model.piece_id(&format!("{WORD_MARKER}world")).is_some() || model.piece_id("world").is_some());
    }
}
