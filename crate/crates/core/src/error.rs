use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("tensor shape {shape:?} does not match data length {len}")]
    BadTensor { shape: Vec<usize>, len: usize },
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),
    #[error("{0}: missing or invalid attribute")]
    BadAttribute(&'static str),
    #[error("{op} expects {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("language `{0}` is not in the language set")]
    UnknownLanguage(String),
    #[error("language `{0}` has no language-specific layer")]
    NoLanguageLayer(String),
    #[error("language `{0}` is already present")]
    LanguageAlreadyPresent(String),
    #[error("token `{0}` is not in the vocabulary")]
    OutOfVocab(String),
    #[error("token id {0} is outside the vocabulary")]
    TokenIdOutOfRange(usize),
    #[error("token `{token}` does not belong to language `{lang}`")]
    ForeignToken { token: String, lang: String },
    #[error("prefix length {len} exceeds the maximum of {max} positions")]
    PrefixTooLong { len: usize, max: usize },
    #[error("invalid data condition: {0}")]
    Condition(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("count mismatch: {0} hypotheses vs {1} references")]
    CountMismatch(usize, usize),
    #[error("reference direction does not share the source sentences")]
    MisalignedSources,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
}
