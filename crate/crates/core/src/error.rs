use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("{entity} {entity_id} references missing {target} id {id}")]
    Reference {
        entity: &'static str,
        entity_id: u64,
        target: &'static str,
        id: u64,
    },

    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),

    #[error("RLE runs sum to {sum}, expected {expected}")]
    RleLength { sum: u64, expected: u64 },

    #[error("RLE size {rle_h}x{rle_w} does not match image {height}x{width}")]
    RleSize {
        rle_h: u32,
        rle_w: u32,
        height: u32,
        width: u32,
    },

    #[error("invalid polygon: {0}")]
    Polygon(String),

    #[error("category id {0} is not covered by the mapping")]
    UncoveredCategory(u64),

    #[error("unknown image id {0}")]
    UnknownImage(u64),

    #[error("transformed object lies entirely outside the target image")]
    OutsideTarget,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
