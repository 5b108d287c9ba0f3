use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("element count mismatch: {from} elements cannot become {to}")]
    ElementCount { from: usize, to: usize },

    #[error("invalid axis {axis} for a rank-{rank} tensor")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("{op} would produce a non-positive output dimension")]
    EmptyOutput { op: &'static str },

    #[error("region of interest lies entirely outside the feature map")]
    RoiOutside,

    #[error("non-finite function value during gradient check")]
    NonFinite,

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("stage {needed} checkpoint is required before stage {requested}")]
    MissingStage { needed: u8, requested: u8 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("detections and annotations cover different image sets: {0}")]
    ImageSetMismatch(String),

    #[error("no evaluated ground truth under setting `{0}`")]
    NoGroundTruth(String),

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
