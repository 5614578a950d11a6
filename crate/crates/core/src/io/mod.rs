//! File formats: weight containers, raw float fixtures, images and masks,
//! frame annotations, and run configuration.

pub mod annotations;
pub mod config;
pub mod image;
pub mod raw;
pub mod weights;

pub use annotations::{ingest_annotations, oracle_stages, parse_annotations, rasterize_polygons, AnnotationRecord};
pub use config::{RunConfig, StageSpec};
pub use image::{read_image, read_mask, write_image, write_mask};
pub use raw::{read_raw_f32, write_raw_f32};
pub use weights::{decode_weights, encode_weights, read_weights, write_weights, FORMAT_VERSION, MAGIC};

use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
