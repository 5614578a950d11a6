//! Raw fixture format: a bare sequence of little-endian f32 values in NCHW
//! order. The shape is supplied by the reader.

use std::path::Path;

use super::{read_file, write_file};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub fn write_raw_f32(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.data().len() * 4);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &bytes)
}

pub fn read_raw_f32(path: &Path, shape: Shape) -> Result<Tensor<f32>> {
    let bytes = read_file(path)?;
    if bytes.len() != shape.len() * 4 {
        return Err(Error::format(format!(
            "{}: {} bytes, expected {} for shape {shape}",
            path.display(),
            bytes.len(),
            shape.len() * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let t = Tensor::from_vec(shape, data)?;
    t.ensure_finite(&path.display().to_string())?;
    Ok(t)
}
