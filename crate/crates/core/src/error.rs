use std::io;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no glyph for symbol {0:?}")]
    MissingGlyph(char),
    #[error("symbol {0:?} is not in the alphabet")]
    MissingClass(char),
    #[error("prefix of length {len} exceeds {capacity} slots")]
    Capacity { len: usize, capacity: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("state error: {0}")]
    State(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("classifier contract violated: {0}")]
    Contract(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("device reported error {code}: {message}")]
    Remote { code: u8, message: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("scene {scene_id:016x}: {source}")]
    Scene {
        scene_id: u64,
        #[source]
        source: Box<Error>,
    },
    #[error("subset {name:?}: {source}")]
    Subset {
        name: String,
        #[source]
        source: Box<Error>,
    },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn in_scene(self, scene_id: u64) -> Self {
        Error::Scene {
            scene_id,
            source: Box::new(self),
        }
    }

    pub(crate) fn in_subset(self, name: &str) -> Self {
        Error::Subset {
            name: name.to_string(),
            source: Box::new(self),
        }
    }

    /// Innermost error, unwrapping scene and subset annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::Scene { source, .. } | Error::Subset { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code: 2 invalid input, 3 data/format, 4 numeric,
    /// 5 transport/protocol.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::InvalidArgument(_) | Error::Capacity { .. } => 2,
            Error::MissingGlyph(_)
            | Error::MissingClass(_)
            | Error::Shape(_)
            | Error::State(_)
            | Error::Format(_)
            | Error::Contract(_)
            | Error::Io(_) => 3,
            Error::Numeric(_) => 4,
            Error::Protocol(_) | Error::Remote { .. } | Error::Transport(_) => 5,
            Error::Scene { .. } | Error::Subset { .. } => unreachable!(),
        }
    }
}
