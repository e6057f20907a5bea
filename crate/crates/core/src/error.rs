use std::io;

use thiserror::Error;

/// Every failure the library can report.
///
/// Variants map one-to-one onto the documented error kinds of each
/// operation; [`Error::kind`] gives the stable machine-readable name.
#[derive(Debug, Error)]
pub enum Error {
    #[error("no date token found in {0:?}")]
    NoDateFound(String),
    #[error("date {start}-{end} lies outside the window {window_start}-{window_end}")]
    OutOfWindow {
        start: i32,
        end: i32,
        window_start: i32,
        window_end: i32,
    },
    #[error("malformed manifest at line {line}: {reason}")]
    MalformedManifest { line: usize, reason: String },
    #[error("duplicate sample id {id:?} at line {line}")]
    DuplicateId { line: usize, id: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value at index {index}")]
    NonFiniteValue { index: usize },
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("image already has a single channel")]
    AlreadyGrayscale,
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("last learnable layer is not fully connected")]
    HeadNotFC,
    #[error("unit {unit} out of range for a layer with {n_units} units")]
    UnitOutOfRange { unit: usize, n_units: usize },
    #[error("histogram has zero total count")]
    EmptyHistogram,
    #[error("occluder of size {occluder} does not fit a {height}x{width} image")]
    OccluderTooLarge {
        occluder: usize,
        height: usize,
        width: usize,
    },
    #[error("patch {patch_h}x{patch_w} does not fit a {height}x{width} image")]
    PatchTooLarge {
        patch_h: usize,
        patch_w: usize,
        height: usize,
        width: usize,
    },
    #[error("rankings are not over the same sample universe: {0}")]
    UniverseMismatch(String),
    #[error("collection has no members")]
    EmptyCollection,
    #[error("probability vector {index} sums to {sum}")]
    Unnormalized { index: usize, sum: f64 },
    #[error("year {0} has no collections")]
    EmptyYear(i32),
    #[error("malformed {what} at line {line}: {reason}")]
    MalformedRecord {
        what: &'static str,
        line: usize,
        reason: String,
    },
    #[error("unknown layer {0:?}")]
    UnknownLayer(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unexpected model kind: expected {expected}, found {found}")]
    WrongModelKind {
        expected: &'static str,
        found: &'static str,
    },
    #[error("image decode error: {0}")]
    ImageDecode(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Stable name of the error kind, used in machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NoDateFound(_) => "NoDateFound",
            Error::OutOfWindow { .. } => "OutOfWindow",
            Error::MalformedManifest { .. } => "MalformedManifest",
            Error::DuplicateId { .. } => "DuplicateId",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::NonFiniteValue { .. } => "NonFiniteValue",
            Error::NonFinite(_) => "NonFinite",
            Error::AlreadyGrayscale => "AlreadyGrayscale",
            Error::VersionMismatch { .. } => "VersionMismatch",
            Error::CorruptFile(_) => "CorruptFile",
            Error::SingleClass => "SingleClass",
            Error::DimMismatch { .. } => "DimMismatch",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::Empty(_) => "Empty",
            Error::EmptyDataset => "EmptyDataset",
            Error::HeadNotFC => "HeadNotFC",
            Error::UnitOutOfRange { .. } => "UnitOutOfRange",
            Error::EmptyHistogram => "EmptyHistogram",
            Error::OccluderTooLarge { .. } => "OccluderTooLarge",
            Error::PatchTooLarge { .. } => "PatchTooLarge",
            Error::UniverseMismatch(_) => "UniverseMismatch",
            Error::EmptyCollection => "EmptyCollection",
            Error::Unnormalized { .. } => "Unnormalized",
            Error::EmptyYear(_) => "EmptyYear",
            Error::MalformedRecord { .. } => "MalformedRecord",
            Error::UnknownLayer(_) => "UnknownLayer",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::WrongModelKind { .. } => "WrongModelKind",
            Error::ImageDecode(_) => "ImageDecode",
            Error::Io(_) => "Io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
