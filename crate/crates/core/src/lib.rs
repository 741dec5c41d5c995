//! litterkit: dataset engineering and mask-AP evaluation for litter detection.
//!
//! The crate is organised around a COCO-style [`Dataset`] value:
//!
//! - [`dataset`] parses, validates and serializes annotation files (with scene tags).
//! - [`taxonomy`] remaps the fine category hierarchy into task taxonomies.
//! - [`stats`] emits dataset statistics as CSV tables.
//! - [`mask`] holds the geometry kernels: rasterization, RLE, IoU, distance
//!   transform, soft masks and blending.
//! - [`transplant`] and [`augment`] synthesize new training data.
//! - [`split`] produces seeded train/val/test folds.
//! - [`eval`] scores predictions and computes mask AP, confusion matrices and
//!   cross-fold summaries.

pub mod augment;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod mask;
pub mod rng;
pub mod split;
pub mod stats;
pub mod synth;
pub mod taxonomy;
pub mod transplant;

pub use dataset::{
    parse_dataset, serialize_dataset, validate, Annotation, Category, Dataset, ImageRecord,
    SceneAssignment, SceneTag, ValidationReport, Violation,
};
pub use error::{Error, Result};
pub use imaging::Image;
pub use mask::{BinaryMask, DistanceField, Rle, Segmentation, SoftMask};
pub use taxonomy::TaxonomyMapping;
