//! PNG readers and writers.
//!
//! Depth maps are 16-bit single-channel grayscale with big-endian sample
//! order inside the PNG stream, meters = stored / 256, stored 0 =
//! unobserved. Round-tripping a representable map reproduces the file
//! byte for byte.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::{DepthMap, MAX_DEPTH_M};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub fn read_depth_png(path: impl AsRef<Path>) -> Result<DepthMap> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::png(path.display().to_string(), e))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::png(path.display().to_string(), e))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::png(
            path.display().to_string(),
            format!(
                "expected 16-bit grayscale, got {:?} {:?}",
                info.color_type, info.bit_depth
            ),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let depth_m = bytes
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 256.0)
        .collect();
    DepthMap::new(h, w, depth_m)
}

pub fn write_depth_png(map: &DepthMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut raw = Vec::with_capacity(map.values().len() * 2);
    for &v in map.values() {
        if !(0.0..=MAX_DEPTH_M).contains(&v) {
            return Err(Error::invalid(format!(
                "depth {v} m outside the representable range [0, {MAX_DEPTH_M}]"
            )));
        }
        let mut code = (v * 256.0).round() as u16;
        // Keep observed pixels observed: tiny positive depths must not
        // collapse onto the unobserved sentinel.
        if v > 0.0 && code == 0 {
            code = 1;
        }
        raw.extend_from_slice(&code.to_be_bytes());
    }
    write_gray_png(path, map.width() as u32, map.height() as u32, png::BitDepth::Sixteen, &raw)
}

/// 8-bit single-channel mask image: 255 where valid, 0 elsewhere.
pub fn write_mask_png<T: Scalar>(mask: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let s = mask.shape();
    if s.batch != 1 || s.channels != 1 {
        return Err(Error::shape("mask png", format!("{s}")));
    }
    let raw: Vec<u8> = mask
        .data()
        .iter()
        .map(|&v| if v == T::zero() { 0 } else { 255 })
        .collect();
    write_gray_png(
        path.as_ref(),
        s.width as u32,
        s.height as u32,
        png::BitDepth::Eight,
        &raw,
    )
}

fn write_gray_png(
    path: &Path,
    width: u32,
    height: u32,
    depth: png::BitDepth,
    raw: &[u8],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width, height);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(depth);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::png(path.display().to_string(), e))?;
    writer
        .write_image_data(raw)
        .map_err(|e| Error::png(path.display().to_string(), e))
}

/// 8-bit RGB guidance image from a `(1, 3, H, W)` tensor in `[0, 1]`.
pub fn write_image_png<T: Scalar>(image: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let s = image.shape();
    if s.batch != 1 || s.channels != 3 {
        return Err(Error::shape("image png", format!("{s}")));
    }
    let mut raw = Vec::with_capacity(s.height * s.width * 3);
    for h in 0..s.height {
        for w in 0..s.width {
            for c in 0..3 {
                let v = image.at(0, c, h, w).as_f64().clamp(0.0, 1.0);
                raw.push((v * 255.0).round() as u8);
            }
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), s.width as u32, s.height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::png(path.display().to_string(), e))?;
    writer
        .write_image_data(&raw)
        .map_err(|e| Error::png(path.display().to_string(), e))
}

/// Read an 8-bit RGB image into a `(1, 3, H, W)` tensor in `[0, 1]`.
pub fn read_image_png<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::png(path.display().to_string(), e))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::png(path.display().to_string(), e))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::png(
            path.display().to_string(),
            format!(
                "expected 8-bit RGB, got {:?} {:?}",
                info.color_type, info.bit_depth
            ),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, hh, ww| {
        T::of_f64(bytes[(hh * w + ww) * 3 + c] as f64 / 255.0)
    }))
}
