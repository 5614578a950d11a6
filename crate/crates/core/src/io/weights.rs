//! Weight container.
//!
//! ```text
//! "TFW1" | header length (u32 LE) | TOML header | zero padding to 16 bytes
//! | payload: f32 LE tensors, each starting on a 16-byte boundary
//! | CRC-32 of the payload (u32 LE)
//! ```
//!
//! The header records the format version, whether the network is fused, the
//! payload length, the full model configuration, and one `[[tensor]]` entry
//! (name, shape, offset within the payload, byte length) per parameter.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_file, write_file};
use crate::error::{Error, Result};
use crate::model::{TfNet, TfNetConfig};
use crate::params::Parameterized;

pub const MAGIC: &[u8; 4] = b"TFW1";
pub const FORMAT_VERSION: u32 = 1;
const ALIGN: usize = 16;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    fused: bool,
    payload_bytes: u64,
    config: TfNetConfig,
    tensor: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    bytes: u64,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Serialize every parameter and running statistic of `model`.
pub fn encode_weights(model: &TfNet<f32>) -> Result<Vec<u8>> {
    let params = model.params();
    let mut entries = Vec::with_capacity(params.len());
    let mut offset = 0usize;
    for p in &params {
        offset = align_up(offset);
        let bytes = p.data.len() * 4;
        entries.push(TensorEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            offset: offset as u64,
            bytes: bytes as u64,
        });
        offset += bytes;
    }
    let payload_len = offset;
    let mut payload = vec![0u8; payload_len];
    for (p, e) in params.iter().zip(&entries) {
        let start = e.offset as usize;
        for (i, v) in p.data.iter().enumerate() {
            payload[start + 4 * i..start + 4 * i + 4].copy_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        fused: model.is_fused(),
        payload_bytes: payload_len as u64,
        config: model.config().clone(),
        tensor: entries,
    };
    let text = toml::to_string(&header).map_err(|e| Error::format(format!("cannot encode header: {e}")))?;
    let header_len = u32::try_from(text.len()).map_err(|_| Error::format("header too large"))?;

    let mut out = Vec::with_capacity(align_up(8 + text.len()) + payload_len + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.resize(align_up(out.len()), 0);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

/// Parse and verify a container, rebuilding the network it describes.
pub fn decode_weights(bytes: &[u8]) -> Result<TfNet<f32>> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::format("not a weight container (bad magic)"));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let header_end = 8usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format("header length exceeds file size"))?;
    let text = std::str::from_utf8(&bytes[8..header_end]).map_err(|_| Error::format("header is not UTF-8"))?;
    let header: Header = toml::from_str(text).map_err(|e| Error::format(format!("invalid header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }

    let payload_start = align_up(header_end);
    let payload_len = usize::try_from(header.payload_bytes).map_err(|_| Error::format("payload too large"))?;
    let expected_total = payload_start
        .checked_add(payload_len)
        .and_then(|n| n.checked_add(4))
        .ok_or_else(|| Error::format("payload length overflows"))?;
    if bytes.len() != expected_total {
        return Err(Error::format(format!(
            "file is {} bytes, header implies {expected_total}",
            bytes.len()
        )));
    }
    if bytes[header_end..payload_start].iter().any(|&b| b != 0) {
        return Err(Error::format("non-zero padding after the header"));
    }
    let payload = &bytes[payload_start..payload_start + payload_len];
    let stored = u32::from_le_bytes(bytes[expected_total - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    check_layout(&header.tensor, payload_len)?;

    header.config.validate()?;
    let mut model = TfNet::<f32>::build(header.config.clone(), 0)?;
    if header.fused {
        model = model.fuse()?;
    }
    let mut by_name: HashMap<&str, &TensorEntry> = HashMap::with_capacity(header.tensor.len());
    for e in &header.tensor {
        if by_name.insert(&e.name, e).is_some() {
            return Err(Error::format(format!("tensor `{}` appears twice", e.name)));
        }
    }
    let mut used = 0usize;
    for p in model.params_mut() {
        let e = by_name
            .get(p.name.as_str())
            .ok_or_else(|| Error::MissingTensor(p.name.clone()))?;
        if e.shape != p.shape {
            return Err(Error::shape(format!(
                "tensor `{}` has shape {:?}, model expects {:?}",
                p.name, e.shape, p.shape
            )));
        }
        let start = e.offset as usize;
        for (i, v) in p.data.iter_mut().enumerate() {
            let at = start + 4 * i;
            *v = f32::from_le_bytes(payload[at..at + 4].try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("tensor `{}` element {i}", p.name)));
            }
        }
        used += 1;
    }
    if used != header.tensor.len() {
        let known: Vec<String> = model.params().into_iter().map(|p| p.name).collect();
        let extra = header
            .tensor
            .iter()
            .find(|e| !known.contains(&e.name))
            .map(|e| e.name.clone())
            .unwrap_or_default();
        return Err(Error::format(format!("container has tensor `{extra}` that the model does not use")));
    }
    Ok(model)
}

fn check_layout(entries: &[TensorEntry], payload_len: usize) -> Result<()> {
    let mut spans = Vec::with_capacity(entries.len());
    for e in entries {
        let elems: usize = e.shape.iter().product();
        if e.bytes != (elems * 4) as u64 {
            return Err(Error::format(format!(
                "tensor `{}`: {} bytes recorded for shape {:?}",
                e.name, e.bytes, e.shape
            )));
        }
        if e.offset as usize % ALIGN != 0 {
            return Err(Error::format(format!("tensor `{}` is not 16-byte aligned", e.name)));
        }
        let end = e.offset.checked_add(e.bytes).filter(|&end| end <= payload_len as u64);
        let Some(end) = end else {
            return Err(Error::format(format!("tensor `{}` extends past the payload", e.name)));
        };
        spans.push((e.offset, end, &e.name));
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::format(format!("tensors `{}` and `{}` overlap", w[0].2, w[1].2)));
        }
    }
    Ok(())
}

pub fn write_weights(model: &TfNet<f32>, path: &Path) -> Result<()> {
    write_file(path, &encode_weights(model)?)
}

pub fn read_weights(path: &Path) -> Result<TfNet<f32>> {
    decode_weights(&read_file(path)?)
}
