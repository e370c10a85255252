//! File formats shared by the dataset generator, the training code and the CLI.
//!
//! * [`raster`]: the `F32R` raster container (magic, `u32` dims, little-endian `f32` payload).
//! * [`manifest`]: the `manifest.json` dataset index.
//! * [`checkpoint`]: the parameter checkpoint container and the raw codebook blob.
//!
//! Every decoder in this crate accepts untrusted bytes and reports malformed
//! input through [`FormatError`] rather than panicking.

pub mod checkpoint;
pub mod error;
pub mod manifest;
pub mod raster;

mod atomic;

pub use atomic::write_atomic;
pub use checkpoint::{Checkpoint, CodebookBlob, TensorRecord};
pub use error::{FormatError, Result};
pub use manifest::{DatasetManifest, SnapshotEntry, MULTIPATH_PARAMS};
pub use raster::Raster;
