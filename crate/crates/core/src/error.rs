use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("no attendable keys")]
    NoAttendableKeys,
    #[error("empty axis in {op}")]
    EmptyAxis { op: &'static str },
    #[error("backward() requires a scalar loss, got shape {0:?}")]
    NotScalar(alloc::vec::Vec<usize>),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("task/dataset channel mismatch: task has {expected} channels, input has {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("{patches} patches exceed max_patches {max}")]
    TooManyPatches { patches: usize, max: usize },
    #[error("no valid patch in {0}")]
    NoValidPatch(&'static str),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("task `{0}` is already registered")]
    DuplicateTask(String),
    #[error("stage contract violated: {0}")]
    Stage(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("training diverged: {0}")]
    Diverged(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
