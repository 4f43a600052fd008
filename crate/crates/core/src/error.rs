use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point has non-positive depth z={0}")]
    NonPositiveDepth(f64),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(&'static str),

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("no point pairs within {max_pair_distance} mm at initialization")]
    NoPairsMatched { max_pair_distance: f64 },

    #[error("nothing visible")]
    NothingVisible,

    #[error("insufficient usable pixels: found {found}, need {needed}")]
    InsufficientPixels { found: usize, needed: usize },

    #[error("no hypothesis passed the acceptance test within {attempts} attempts")]
    HypothesisPoolEmpty { attempts: usize },

    #[error("PnP degenerate: {0}")]
    PnpDegenerate(&'static str),

    #[error("PnP solution places all points behind the camera")]
    PnpBehindCamera,

    #[error("camera intrinsics or resolution differ between frames")]
    IntrinsicsMismatch,

    #[error("mask has no evaluable pixels")]
    EmptyMask,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("manifest line {line}: {message}")]
    ManifestParse { line: usize, message: String },

    #[error("frame {frame}: missing file {}", path.display())]
    MissingFile { frame: String, path: PathBuf },

    #[error("frame {frame}: {message}")]
    FrameDimensionMismatch { frame: String, message: String },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NonPositiveDepth(_) => "NonPositiveDepth",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::DegenerateConfiguration(_) => "DegenerateConfiguration",
            Error::EmptyCloud => "EmptyCloud",
            Error::NoPairsMatched { .. } => "NoPairsMatched",
            Error::NothingVisible => "NothingVisible",
            Error::InsufficientPixels { .. } => "InsufficientPixels",
            Error::HypothesisPoolEmpty { .. } => "HypothesisPoolEmpty",
            Error::PnpDegenerate(_) => "PnpDegenerate",
            Error::PnpBehindCamera => "PnpBehindCamera",
            Error::IntrinsicsMismatch => "IntrinsicsMismatch",
            Error::EmptyMask => "EmptyMask",
            Error::InvalidInput(_) => "InvalidInput",
            Error::Parse { .. } => "Parse",
            Error::ManifestParse { .. } => "ManifestParse",
            Error::MissingFile { .. } => "MissingFile",
            Error::FrameDimensionMismatch { .. } => "DimensionMismatch",
            Error::Io { .. } => "Io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
