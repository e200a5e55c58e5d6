//! Error types for each subsystem plus the process-level exit-code mapping.

use thiserror::Error;

/// Errors raised by tensor/tape arithmetic and the optimizer.
#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("bad tensor shape: {what}")]
    BadShape { what: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("{op} expects a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("invalid configuration: {what}")]
    InvalidConfig { what: String },
    #[error("backward already ran on this tape")]
    BackwardTwice,
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    IdOutOfRange { id: usize, vocab: usize },
}

/// Errors raised by tokenizer training, segmentation, and model files.
#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("target vocabulary {target} is below the floor of {floor} (covered characters plus specials)")]
    VocabBelowFloor { target: usize, floor: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("piece id {id} out of range for vocabulary of {vocab}")]
    IdOutOfRange { id: usize, vocab: usize },
    #[error("bad model file at line {line}: {what}")]
    BadModelFile { line: usize, what: String },
    #[error("unknown tokenizer kind '{0}'")]
    UnknownKind(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Errors raised while assembling or transferring networks.
#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("config mismatch on transfer; differing fields: {0:?}")]
    TransferMismatch(Vec<String>),
    #[error("unknown recurrent cell '{0}'")]
    UnknownCell(String),
    #[error("missing parameter '{0}'")]
    MissingParam(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Errors raised by schedules, batching, and the training loops.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("schedule step {step} outside [0, {total}]")]
    StepOutOfRange { step: usize, total: usize },
    #[error("token stream too short: {len} tokens for batch size {batch}")]
    StreamTooShort { len: usize, batch: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("class id {id} out of range for {classes} classes (line {line})")]
    BadClassId { id: usize, classes: usize, line: usize },
    #[error("example text is empty (line {line})")]
    EmptyText { line: usize },
    #[error("malformed dataset line {line}: {what}")]
    BadLine { line: usize, what: String },
    #[error("checkpoint vocabulary ({checkpoint}) does not match tokenizer ({tokenizer})")]
    VocabMismatch { checkpoint: usize, tokenizer: usize },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Errors raised by pseudo-label ingestion and the noise harness.
#[derive(Debug, Error)]
pub enum BootstrapError {
    #[error("duplicate example id '{id}' at line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("unknown class {class} at line {line} (task has {classes} classes)")]
    UnknownClass { class: usize, classes: usize, line: usize },
    #[error("malformed record at line {line}: {what}")]
    BadRecord { line: usize, what: String },
    #[error("pseudo-label set is empty")]
    EmptyPseudoSet,
    #[error("{count} pseudo-label ids do not resolve to a text; first: {sample:?}")]
    UnresolvedIds { count: usize, sample: Vec<String> },
    #[error("noise probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Errors raised by checkpoint serialization.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic; not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checksum mismatch; file is corrupt or truncated")]
    Checksum,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Errors raised by config parsing.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key '{key}'{}", at_line(.line))]
    UnknownKey { key: String, line: Option<usize> },
    #[error("bad value for '{key}'{}: {what}", at_line(.line))]
    BadValue { key: String, line: Option<usize>, what: String },
    #[error("malformed line {line}: expected 'key = value'")]
    BadLine { line: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn at_line(line: &Option<usize>) -> String {
    match line {
        Some(n) => format!(" (line {n})"),
        None => String::new(),
    }
}

/// Process exit classes: usage 1, data 2, numeric 3.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<NumericsError> for CliError {
    fn from(e: NumericsError) -> Self {
        match e {
            NumericsError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<TokenizerError> for CliError {
    fn from(e: TokenizerError) -> Self {
        match e {
            TokenizerError::VocabBelowFloor { .. } | TokenizerError::UnknownKind(_) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::Numerics(n) => n.into(),
            NetworkError::UnknownCell(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Numerics(n) => n.into(),
            TrainError::StepOutOfRange { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<BootstrapError> for CliError {
    fn from(e: BootstrapError) -> Self {
        match e {
            BootstrapError::BadProbability(_) => CliError::Usage(e.to_string()),
            BootstrapError::Train(t) => t.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
