use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] cll_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Malformed { path: PathBuf, line: usize, msg: String },
    #[error("{path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("{path}: content hash {found} does not match the manifest ({expected})")]
    Integrity {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("missing corpus: {0}")]
    MissingCorpus(PathBuf),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable kebab-case class printed by the command-line tool.
    pub fn class(&self) -> &'static str {
        use cll_core::Error as C;
        match self {
            Error::Core(e) => match e {
                C::VocabMismatch(_) | C::OutOfVocab(_) | C::TokenIdOutOfRange(_) | C::ForeignToken { .. } => {
                    "vocab-mismatch"
                }
                C::Condition(_) => "bad-condition",
                C::Config(_) => "config",
                C::UnknownLanguage(_) => "unknown-language",
                C::NoLanguageLayer(_) => "no-language-layer",
                C::LanguageAlreadyPresent(_) => "language-already-present",
                C::EmptyCorpus => "empty-corpus",
                C::MisalignedSources | C::CountMismatch(..) => "misaligned",
                _ => "internal",
            },
            Error::Io { .. } => "io",
            Error::Malformed { .. } => "malformed",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Integrity { .. } => "integrity",
            Error::MissingCorpus(_) => "missing-corpus",
            Error::Config(_) | Error::Json(_) => "config",
            Error::Csv(_) => "malformed",
        }
    }
}
