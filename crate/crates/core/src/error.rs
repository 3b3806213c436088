use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("input shorter than kernel: length {len} < kernel {kernel}")]
    InputShorterThanKernel { len: usize, kernel: usize },

    #[error("grouping error: {channels} channels not divisible by {groups} groups")]
    Grouping { channels: usize, groups: usize },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("patching error: {0}")]
    Patching(String),

    #[error("{path}: parse error at row {row}, column {col}: {msg}")]
    Parse {
        path: PathBuf,
        row: usize,
        col: usize,
        msg: String,
    },

    #[error("{path}: malformed csv: {msg}")]
    Structure { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("split too short: {split} has {len} steps, need at least {needed}")]
    SplitTooShort {
        split: &'static str,
        len: usize,
        needed: usize,
    },

    #[error("config error in `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (lr {lr})")]
    NonFiniteLoss { epoch: usize, batch: usize, lr: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("empty split: {0}")]
    EmptySplit(&'static str),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("analysis error: {0}")]
    Analysis(String),
}

impl Error {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
