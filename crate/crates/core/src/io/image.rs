//! Binary PPM (P6) and PGM (P5) images and masks; PNG with the `png` feature.
//!
//! Images load as `(1, 3, h, w)` tensors with values in [0, 1]; grey images
//! are replicated to three channels. Masks are grey images whose pixels are
//! either 0 (background) or the maximum value (break-up).

use std::path::Path;

use super::{read_file, write_file};
use crate::error::{Error, Result};
use crate::metrics::SegMask;
use crate::tensor::{Shape, Tensor};

/// Decoded raster: `channels` is 1 or 3, samples scaled to 0..=maxval.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

pub fn parse_pnm(bytes: &[u8]) -> Result<Raster> {
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::format("truncated image header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::format(format!("unsupported image type `{other}` (expected binary P5/P6)"))),
    };
    let mut number = |what: &str| -> Result<usize> {
        let t = token()?;
        t.parse()
            .map_err(|_| Error::format(format!("invalid image {what} `{t}`")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::format("image has zero size"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(format!("invalid maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let bytes_per = if maxval < 256 { 1 } else { 2 };
    let count = width * height * channels;
    let data = bytes
        .get(pos..pos + count * bytes_per)
        .ok_or_else(|| Error::format("truncated image data"))?;
    let samples: Vec<u16> = if bytes_per == 1 {
        data.iter().map(|&b| b as u16).collect()
    } else {
        data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    };
    if let Some(&v) = samples.iter().find(|&&v| v as usize > maxval) {
        return Err(Error::format(format!("sample {v} exceeds maxval {maxval}")));
    }
    Ok(Raster {
        width,
        height,
        channels,
        maxval: maxval as u16,
        samples,
    })
}

pub fn encode_pnm(r: &Raster) -> Vec<u8> {
    let magic = if r.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n{}\n", r.width, r.height, r.maxval).into_bytes();
    if r.maxval < 256 {
        out.extend(r.samples.iter().map(|&v| v as u8));
    } else {
        for v in &r.samples {
            out.extend_from_slice(&v.to_be_bytes());
        }
    }
    out
}

#[cfg(feature = "png")]
fn read_png(path: &Path) -> Result<Raster> {
    let img = ::image::open(path).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    let (channels, samples, width, height) = if img.color().has_color() {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        (3, rgb.into_raw().into_iter().map(u16::from).collect(), w, h)
    } else {
        let g = img.to_luma8();
        let (w, h) = g.dimensions();
        (1, g.into_raw().into_iter().map(u16::from).collect(), w, h)
    };
    Ok(Raster {
        width: width as usize,
        height: height as usize,
        channels,
        maxval: 255,
        samples,
    })
}

#[cfg(not(feature = "png"))]
fn read_png(path: &Path) -> Result<Raster> {
    Err(Error::format(format!(
        "{}: PNG support is not compiled in (enable the `png` feature)",
        path.display()
    )))
}

#[cfg(feature = "png")]
fn write_png(path: &Path, r: &Raster) -> Result<()> {
    let data: Vec<u8> = r.samples.iter().map(|&v| (v as u32 * 255 / r.maxval as u32) as u8).collect();
    let color = if r.channels == 1 {
        ::image::ExtendedColorType::L8
    } else {
        ::image::ExtendedColorType::Rgb8
    };
    ::image::save_buffer(path, &data, r.width as u32, r.height as u32, color)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

#[cfg(not(feature = "png"))]
fn write_png(path: &Path, _r: &Raster) -> Result<()> {
    read_png(path).map(|_| ())
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    if is_png(path) {
        return read_png(path);
    }
    parse_pnm(&read_file(path)?).map_err(|e| match e {
        Error::Format(m) => Error::format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_raster(path: &Path, r: &Raster) -> Result<()> {
    if is_png(path) {
        return write_png(path, r);
    }
    write_file(path, &encode_pnm(r))
}

pub fn raster_to_tensor(r: &Raster) -> Tensor<f32> {
    let scale = 1.0 / r.maxval as f32;
    Tensor::from_fn(Shape::new(1, 3, r.height, r.width), |_, c, y, x| {
        let ch = if r.channels == 1 { 0 } else { c };
        r.samples[(y * r.width + x) * r.channels + ch] as f32 * scale
    })
}

/// Image as a `(1, 3, h, w)` tensor in [0, 1].
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    Ok(raster_to_tensor(&read_raster(path)?))
}

/// Write a `(1, 3, h, w)` tensor in [0, 1] as an 8-bit colour image.
pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::shape(format!("expected a 1x3xHxW image, got {s}")));
    }
    let mut samples = Vec::with_capacity(3 * s.plane());
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                samples.push((image.at(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u16);
            }
        }
    }
    write_raster(
        path,
        &Raster {
            width: s.w,
            height: s.h,
            channels: 3,
            maxval: 255,
            samples,
        },
    )
}

pub fn mask_from_raster(r: &Raster, origin: &str) -> Result<SegMask> {
    let mut labels = Vec::with_capacity(r.width * r.height);
    for i in 0..r.width * r.height {
        let px = &r.samples[i * r.channels..(i + 1) * r.channels];
        if px.iter().any(|&v| v != px[0]) {
            return Err(Error::format(format!("{origin}: mask pixel {i} is not grey")));
        }
        labels.push(match px[0] {
            0 => 0,
            v if v == r.maxval => 1,
            v => {
                return Err(Error::format(format!(
                    "{origin}: mask value {v} at pixel {i} is neither 0 nor {}",
                    r.maxval
                )))
            }
        });
    }
    SegMask::new(r.height, r.width, labels)
}

pub fn read_mask(path: &Path) -> Result<SegMask> {
    mask_from_raster(&read_raster(path)?, &path.display().to_string())
}

/// Write a mask as an 8-bit grey image: 0 background, 255 break-up.
pub fn write_mask(path: &Path, mask: &SegMask) -> Result<()> {
    write_raster(
        path,
        &Raster {
            width: mask.width(),
            height: mask.height(),
            channels: 1,
            maxval: 255,
            samples: mask.labels().iter().map(|&l| l as u16 * 255).collect(),
        },
    )
}
