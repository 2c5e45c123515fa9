use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("unrecognized container: {0}")]
    UnrecognizedContainer(String),
    #[error("incomplete container: missing tensor `{0}`")]
    IncompleteContainer(String),
    #[error("topology mismatch: {0}")]
    TopologyMismatch(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("missing trace activation for layer `{0}`")]
    MissingTraceActivation(String),
    #[error("layer mismatch: {0}")]
    LayerMismatch(String),
    #[error("no styles selected")]
    NoStylesSelected,

    #[error("bad image: {0}")]
    BadImage(String),
    #[error("bad attributes: {0}")]
    BadAttributes(String),
    #[error("duplicate item id `{0}`")]
    Duplicate(String),
    #[error("attribute not in closet: `{0}`")]
    AttributeNotInCloset(String),
    #[error("empty store")]
    EmptyStore,
    #[error("incompatible store: {0}")]
    IncompatibleStore(String),
    #[error("corrupt store: {0}")]
    CorruptStore(String),

    #[error("no garment found")]
    NoGarmentFound,

    #[error("empty experiment: {0}")]
    EmptyExperiment(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// True for failures caused by the filesystem rather than by the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
