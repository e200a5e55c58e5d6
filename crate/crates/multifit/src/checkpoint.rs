//! Self-describing binary model snapshots.
//!
//! Layout: magic `MFIT`, u32 format version, u64-length-prefixed UTF-8
//! config text, u32 tensor count, then per tensor a u16 name length, the
//! name bytes, a u8 rank, u32 dimensions, and row-major little-endian f32
//! values; the file ends with a 64-bit FNV-1a checksum of everything
//! before it. Values persist at training precision (32-bit); shared
//! tensors are stored once — the decoder reads the embedding matrix by
//! construction, so rebuilding a model from the stored tensors restores
//! the sharing.
//!
//! The config text carries the effective run configuration plus
//! `meta.*` lines (checkpoint kind, class count, tokenizer content hash)
//! that describe the artifact rather than the run.

use std::collections::HashMap;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{CheckpointError, ConfigError};
use crate::network::{build_language_model, transfer_encoder, LanguageModel, TextClassifier};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MFIT";
pub const VERSION: u32 = 1;

/// 64-bit FNV-1a, used for the trailing file checksum and for content
/// hashes referenced from the config text.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// In-memory form of a checkpoint file: the config text and the named
/// tensors, in serialization order.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_text: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// `meta.*` lines from the config text, without the prefix.
    pub fn meta(&self) -> HashMap<String, String> {
        let mut out = HashMap::new();
        for line in self.config_text.lines() {
            if let Some((key, value)) = line.split_once('=') {
                if let Some(name) = key.trim().strip_prefix("meta.") {
                    out.insert(name.to_string(), value.trim().to_string());
                }
            }
        }
        out
    }

    /// Parse the non-`meta` portion of the config text.
    pub fn run_config(&self) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        let body: String = self
            .config_text
            .lines()
            .filter(|l| !l.trim_start().starts_with("meta."))
            .map(|l| format!("{l}\n"))
            .collect();
        cfg.apply_text(&body)?;
        Ok(cfg)
    }
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serialize to the binary layout (checksum included).
pub fn checkpoint_bytes(cp: &Checkpoint) -> Result<Vec<u8>, CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    push_u32(&mut buf, VERSION);
    push_u64(&mut buf, cp.config_text.len() as u64);
    buf.extend_from_slice(cp.config_text.as_bytes());
    let count = u32::try_from(cp.tensors.len())
        .map_err(|_| CheckpointError::Malformed("too many tensors".into()))?;
    push_u32(&mut buf, count);
    for (name, tensor) in &cp.tensors {
        let name_len = u16::try_from(name.len())
            .map_err(|_| CheckpointError::Malformed(format!("name '{name}' too long")))?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(tensor.shape().len())
            .map_err(|_| CheckpointError::Malformed(format!("tensor '{name}' rank too large")))?;
        buf.push(rank);
        for &dim in tensor.shape() {
            let d = u32::try_from(dim).map_err(|_| {
                CheckpointError::Malformed(format!("tensor '{name}' dimension too large"))
            })?;
            push_u32(&mut buf, d);
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let checksum = fnv1a64(&buf);
    push_u64(&mut buf, checksum);
    Ok(buf)
}

pub fn save_checkpoint(path: &Path, cp: &Checkpoint) -> Result<(), CheckpointError> {
    std::fs::write(path, checkpoint_bytes(cp)?)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        // The checksum already vouched for the byte count; running out here
        // means the counts inside the payload are inconsistent.
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(
            || CheckpointError::Malformed("section length exceeds file size".into()),
        )?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parse checkpoint bytes, verifying magic, version, and checksum.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() >= 4 && bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    // Too short to hold even the fixed header and trailing checksum: the
    // file was cut off, which the checksum contract covers.
    if bytes.len() < 4 + 4 + 8 + 4 + 8 {
        return Err(CheckpointError::Checksum);
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a64(payload) != stored {
        return Err(CheckpointError::Checksum);
    }
    let mut r = Reader { bytes: payload, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let config_len = r.u64()? as usize;
    let config_text = String::from_utf8(r.take(config_len)?.to_vec())
        .map_err(|_| CheckpointError::Malformed("config text is not UTF-8".into()))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for chunk in r.take(numel * 4)?.chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Malformed(format!("tensor '{name}': {e}")))?;
        tensors.push((name, tensor));
    }
    if r.pos != payload.len() {
        return Err(CheckpointError::Malformed("trailing bytes after last tensor".into()));
    }
    Ok(Checkpoint { config_text, tensors })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

fn meta_block(kind: &str, n_classes: Option<usize>, tokenizer_hash: Option<u64>) -> String {
    let mut text = format!("meta.kind = {kind}\n");
    if let Some(k) = n_classes {
        text.push_str(&format!("meta.n_classes = {k}\n"));
    }
    if let Some(h) = tokenizer_hash {
        text.push_str(&format!("meta.tokenizer_hash = {h:016x}\n"));
    }
    text
}

/// Package a language model with its effective run config. The tokenizer
/// hash records which tokenizer produced the model's vocabulary.
pub fn lm_checkpoint(lm: &LanguageModel, run: &RunConfig, tokenizer_hash: Option<u64>) -> Checkpoint {
    let config_text = format!("{}{}", meta_block("lm", None, tokenizer_hash), run.echo());
    let tensors = lm.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    Checkpoint { config_text, tensors }
}

/// Package a classifier (encoder, head, and batch-norm buffers).
pub fn classifier_checkpoint(
    clf: &TextClassifier,
    run: &RunConfig,
    tokenizer_hash: Option<u64>,
) -> Checkpoint {
    let config_text =
        format!("{}{}", meta_block("clf", Some(clf.n_classes), tokenizer_hash), run.echo());
    let tensors = clf.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    Checkpoint { config_text, tensors }
}

fn restore_params<'a>(
    expected: impl Iterator<Item = &'a str>,
    cp: &Checkpoint,
    write: &mut dyn FnMut(&str, &Tensor) -> Result<(), CheckpointError>,
) -> Result<(), CheckpointError> {
    let mut wanted: Vec<&str> = expected.collect();
    for (name, tensor) in &cp.tensors {
        let slot = wanted.iter().position(|w| w == name).ok_or_else(|| {
            CheckpointError::Malformed(format!("unexpected tensor '{name}' for this architecture"))
        })?;
        wanted.swap_remove(slot);
        write(name, tensor)?;
    }
    if let Some(missing) = wanted.first() {
        return Err(CheckpointError::Malformed(format!("missing tensor '{missing}'")));
    }
    Ok(())
}

/// Rebuild the language model a checkpoint describes: construct the
/// architecture from the stored config, then overwrite every parameter.
pub fn lm_from_checkpoint(cp: &Checkpoint) -> Result<(LanguageModel, RunConfig), CheckpointError> {
    let run = cp.run_config().map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let kind = cp.meta().get("kind").cloned().unwrap_or_default();
    if kind != "lm" {
        return Err(CheckpointError::Malformed(format!(
            "expected a language-model checkpoint, found kind '{kind}'"
        )));
    }
    let mut lm = build_language_model(&run.model, run.train.seed)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let names: Vec<String> = lm.params.iter().map(|(n, _)| n.to_string()).collect();
    restore_params(names.iter().map(|s| s.as_str()), cp, &mut |name, tensor| {
        let dst = lm.params.get_mut(name).expect("expected names exist");
        if dst.shape() != tensor.shape() {
            return Err(CheckpointError::Malformed(format!(
                "tensor '{name}' has shape {:?}, architecture wants {:?}",
                tensor.shape(),
                dst.shape()
            )));
        }
        *dst = tensor.clone();
        Ok(())
    })?;
    Ok((lm, run))
}

/// Rebuild a classifier checkpoint: architecture from the stored config
/// and class count, parameters and batch-norm buffers from the tensors.
pub fn classifier_from_checkpoint(
    cp: &Checkpoint,
) -> Result<(TextClassifier, RunConfig), CheckpointError> {
    let run = cp.run_config().map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let meta = cp.meta();
    if meta.get("kind").map(|s| s.as_str()) != Some("clf") {
        return Err(CheckpointError::Malformed("expected a classifier checkpoint".into()));
    }
    let n_classes: usize = meta
        .get("n_classes")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CheckpointError::Malformed("missing or bad meta.n_classes".into()))?;
    let lm = build_language_model(&run.model, run.train.seed)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let mut clf = transfer_encoder(&lm, &run.model, n_classes, run.train.seed)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let names: Vec<String> = clf.params.iter().map(|(n, _)| n.to_string()).collect();
    restore_params(names.iter().map(|s| s.as_str()), cp, &mut |name, tensor| {
        let dst = clf.params.get_mut(name).expect("expected names exist");
        if dst.shape() != tensor.shape() {
            return Err(CheckpointError::Malformed(format!(
                "tensor '{name}' has shape {:?}, architecture wants {:?}",
                tensor.shape(),
                dst.shape()
            )));
        }
        *dst = tensor.clone();
        Ok(())
    })?;
    Ok((clf, run))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Precision, Tape};
    use crate::network::{lm_eval_logits, ModelConfig, RecurrentState};

    fn tiny_run() -> RunConfig {
        let mut run = RunConfig::default();
        run.model = ModelConfig::tiny(9, 3, 4, 2);
        run
    }

    fn f32_clean(lm: &mut LanguageModel) {
        // Snap initial weights to f32 so the persisted values match the
        // in-memory ones bitwise (training at 32-bit does this anyway).
        for (_, t) in lm.params.trainable_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    #[test]
    fn round_trip_restores_every_tensor_bitwise() {
        let run = tiny_run();
        let mut lm = build_language_model(&run.model, 5).unwrap();
        f32_clean(&mut lm);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &lm_checkpoint(&lm, &run, Some(0xabcd))).unwrap();
        let cp = load_checkpoint(&path).unwrap();
        assert_eq!(cp.meta().get("kind").unwrap(), "lm");
        assert_eq!(cp.meta().get("tokenizer_hash").unwrap(), "000000000000abcd");
        let (restored, run2) = lm_from_checkpoint(&cp).unwrap();
        assert_eq!(run2, run);
        assert_eq!(restored.params.len(), lm.params.len());
        for (name, tensor) in lm.params.iter() {
            let got = restored.params.get(name).unwrap();
            assert_eq!(got.shape(), tensor.shape());
            assert_eq!(got.data(), tensor.data(), "{name} changed across the round trip");
        }
    }

    #[test]
    fn decoder_stays_tied_to_the_embedding_after_reload() {
        let run = tiny_run();
        let mut lm = build_language_model(&run.model, 7).unwrap();
        f32_clean(&mut lm);
        let bytes = checkpoint_bytes(&lm_checkpoint(&lm, &run, None)).unwrap();
        let (mut restored, _) = lm_from_checkpoint(&checkpoint_from_bytes(&bytes).unwrap()).unwrap();
        let logits_of = |lm: &LanguageModel| {
            let mut tape = Tape::new(Precision::F64);
            let mut state = RecurrentState::zeros(&lm.config, 1);
            let (_, v) = lm_eval_logits(lm, &mut tape, &[1, 2], 2, 1, &mut state).unwrap();
            tape.value(v).clone()
        };
        let before = logits_of(&restored);
        restored.params.get_mut("embedding").unwrap().data_mut()[0] += 0.5;
        let after = logits_of(&restored);
        assert!(
            before.max_abs_diff(&after) > 0.0,
            "decoder no longer reads the embedding after reload"
        );
        // And the tied matrix is stored exactly once.
        let stored = checkpoint_from_bytes(&bytes).unwrap();
        let embedding_entries =
            stored.tensors.iter().filter(|(n, _)| n == "embedding").count();
        assert_eq!(embedding_entries, 1);
        assert!(stored.tensor("decoder.weight").is_none());
    }

    #[test]
    fn truncated_files_fail_the_checksum_not_the_parser() {
        let run = tiny_run();
        let lm = build_language_model(&run.model, 3).unwrap();
        let bytes = checkpoint_bytes(&lm_checkpoint(&lm, &run, None)).unwrap();
        for cut in [bytes.len() - 1, bytes.len() / 2, 21, 3, 0] {
            let err = checkpoint_from_bytes(&bytes[..cut]).err().unwrap();
            assert!(
                matches!(err, CheckpointError::Checksum | CheckpointError::BadMagic),
                "cut at {cut}: {err:?}"
            );
        }
        let err = checkpoint_from_bytes(&bytes[..bytes.len() - 1]).err().unwrap();
        assert!(matches!(err, CheckpointError::Checksum));
    }

    #[test]
    fn flipped_payload_byte_fails_the_checksum() {
        let run = tiny_run();
        let lm = build_language_model(&run.model, 3).unwrap();
        let mut bytes = checkpoint_bytes(&lm_checkpoint(&lm, &run, None)).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        assert!(matches!(
            checkpoint_from_bytes(&bytes).err().unwrap(),
            CheckpointError::Checksum
        ));
    }

    #[test]
    fn wrong_magic_and_wrong_version_are_distinct_errors() {
        let run = tiny_run();
        let lm = build_language_model(&run.model, 3).unwrap();
        let good = checkpoint_bytes(&lm_checkpoint(&lm, &run, None)).unwrap();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            checkpoint_from_bytes(&bad_magic).err().unwrap(),
            CheckpointError::BadMagic
        ));
        let mut bad_version = good;
        bad_version[4..8].copy_from_slice(&99u32.to_le_bytes());
        let len = bad_version.len();
        let sum = fnv1a64(&bad_version[..len - 8]);
        bad_version[len - 8..].copy_from_slice(&sum.to_le_bytes());
        assert!(matches!(
            checkpoint_from_bytes(&bad_version).err().unwrap(),
            CheckpointError::BadVersion(99)
        ));
    }

    #[test]
    fn values_persist_at_training_precision() {
        let run = tiny_run();
        let mut lm = build_language_model(&run.model, 11).unwrap();
        // A value that is not representable in f32 must come back rounded.
        lm.params.get_mut("embedding").unwrap().data_mut()[0] = 0.1234567890123456789;
        let bytes = checkpoint_bytes(&lm_checkpoint(&lm, &run, None)).unwrap();
        let cp = checkpoint_from_bytes(&bytes).unwrap();
        let stored = cp.tensor("embedding").unwrap().data()[0];
        assert_eq!(stored, 0.1234567890123456789f64 as f32 as f64);
    }

    #[test]
    fn classifier_checkpoints_carry_class_count_and_buffers() {
        let run = tiny_run();
        let lm = build_language_model(&run.model, 2).unwrap();
        let mut clf = transfer_encoder(&lm, &run.model, 3, run.train.seed).unwrap();
        for (_, t) in clf.params.trainable_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        clf.params.get_mut("head.bn.running_mean").unwrap().data_mut()[0] = 0.25;
        let bytes = checkpoint_bytes(&classifier_checkpoint(&clf, &run, None)).unwrap();
        let (restored, _) = classifier_from_checkpoint(&checkpoint_from_bytes(&bytes).unwrap())
            .unwrap();
        assert_eq!(restored.n_classes, 3);
        assert!(restored.params.is_buffer("head.bn.running_mean"));
        assert_eq!(
            restored.params.get("head.bn.running_mean").unwrap().data()[0],
            0.25
        );
        for (name, tensor) in clf.params.iter() {
            assert_eq!(restored.params.get(name).unwrap().data(), tensor.data(), "{name}");
        }
    }

    #[test]
    fn checkpoints_for_the_wrong_architecture_are_rejected() {
        let run = tiny_run();
        let lm = build_language_model(&run.model, 2).unwrap();
        let mut cp = lm_checkpoint(&lm, &run, None);
        // Claim a different depth than the stored tensors provide.
        cp.config_text = cp.config_text.replace("model.n_layers = 2", "model.n_layers = 1");
        let err = lm_from_checkpoint(&cp).err().unwrap();
        assert!(matches!(err, CheckpointError::Malformed(_)));
    }
}
