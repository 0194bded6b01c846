use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = AuditError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },

    #[error("empty registry")]
    EmptyRegistry,

    #[error("duplicate id \"{0}\"")]
    DuplicateId(String),

    #[error("entity \"{entity}\" has no surface form for language \"{language}\"")]
    MissingSurfaceForm { entity: String, language: String },

    #[error("entity \"{entity}\": metadata key \"{key}\" is not declared in the taxonomy")]
    UnknownMetadataKey { entity: String, key: String },

    #[error("entity \"{entity}\": value \"{value}\" is not allowed for metadata key \"{key}\"")]
    UnknownMetadataValue { entity: String, key: String, value: String },

    #[error("unknown grouping key \"{0}\"")]
    UnknownGroupingKey(String),

    #[error("task \"{task}\": {message}")]
    InvalidSchema { task: String, message: String },

    #[error("unknown task \"{0}\"")]
    UnknownTask(String),

    #[error("template \"{0}\" has no placeholder X")]
    MissingPlaceholder(String),

    #[error("template \"{template}\": label \"{label}\" is not in the schema of task \"{task}\"")]
    UnknownLabel { template: String, task: String, label: String },

    #[error("template \"{template}\": language \"{language}\" is not declared")]
    UndeclaredLanguage { template: String, language: String },

    #[error("vocabulary too small: {available} distinct keywords, {requested} requested")]
    VocabularyTooSmall { available: usize, requested: usize },

    #[error("few-shot bank is empty")]
    EmptyFewShotBank,

    #[error("cannot split {total} items over {labels} labels")]
    BatchTooSmall { total: usize, labels: usize },

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("no label token among the returned candidates")]
    NoLabelToken,

    #[error("need at least {needed} values, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("degenerate pairs: all differences are zero")]
    DegeneratePairs,

    #[error("empty sample")]
    EmptySample,

    #[error("zero denominator: {0}")]
    ZeroDenominator(&'static str),

    #[error("constant input vector")]
    ConstantVector,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("entity \"{0}\" is missing on one side of a paired comparison")]
    UnpairedEntity(String),

    #[error("entity key sets are disjoint")]
    DisjointKeys,

    #[error("empty group: {0}")]
    EmptyGroup(String),

    #[error("zero vector for \"{0}\"")]
    ZeroVector(String),

    #[error("configuration {0} not present in the store")]
    ConfigAbsent(String),

    #[error("no similarity matrices left after filtering")]
    EmptyFilter,

    #[error("requested {requested} pairs but only {available} exist")]
    TooManyPairs { requested: usize, available: usize },

    #[error("overlapping entity spans in item \"{0}\"")]
    OverlappingSpans(String),

    #[error("invalid span in item \"{0}\"")]
    InvalidSpan(String),

    #[error("empty configuration matrix")]
    EmptyConfigMatrix,

    #[error("manifest digest mismatch: {0}")]
    DigestMismatch(String),

    #[error("unknown export kind \"{0}\"")]
    UnknownExportKind(String),

    #[error("store corrupted at offset {offset}: {message}")]
    CorruptStore { offset: u64, message: String },

    #[error("{0}")]
    Invalid(String),
}

impl AuditError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AuditError::Io { path: path.into(), source }
    }
}

impl From<csv::Error> for AuditError {
    fn from(e: csv::Error) -> Self {
        AuditError::Invalid(format!("csv: {e}"))
    }
}
