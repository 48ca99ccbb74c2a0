//! Minimal PNG read/write for grayscale slices, label masks and RGB overlays.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// Decoded grayscale samples widened to 16 bits.
#[derive(Debug, Clone)]
pub struct GrayPng {
    pub width: usize,
    pub height: usize,
    pub bit_depth: u8,
    pub samples: Vec<u16>,
}

fn encoding_error(path: &Path, err: png::EncodingError) -> Error {
    match err {
        png::EncodingError::IoError(e) => Error::io(path, e),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    bytes: &[u8],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(depth);
    let mut writer = encoder.write_header().map_err(|e| encoding_error(path, e))?;
    writer
        .write_image_data(bytes)
        .map_err(|e| encoding_error(path, e))?;
    writer.finish().map_err(|e| encoding_error(path, e))
}

pub fn write_gray16(path: &Path, width: usize, height: usize, samples: &[u16]) -> Result<()> {
    let bytes: Vec<u8> = samples.iter().flat_map(|v| v.to_be_bytes()).collect();
    write_png(
        path,
        width,
        height,
        png::ColorType::Grayscale,
        png::BitDepth::Sixteen,
        &bytes,
    )
}

pub fn write_gray8(path: &Path, width: usize, height: usize, samples: &[u8]) -> Result<()> {
    write_png(
        path,
        width,
        height,
        png::ColorType::Grayscale,
        png::BitDepth::Eight,
        samples,
    )
}

pub fn write_rgb8(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    write_png(
        path,
        width,
        height,
        png::ColorType::Rgb,
        png::BitDepth::Eight,
        rgb,
    )
}

/// Encodes an RGB buffer to PNG bytes in memory.
pub fn encode_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, width as u32, height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::Format(e.to_string()))?;
        writer
            .write_image_data(rgb)
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(out)
}

pub fn read_gray(path: &Path) -> Result<GrayPng> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let bad = |e: png::DecodingError| match e {
        png::DecodingError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    };
    let mut reader = decoder.read_info().map_err(bad)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::Format(format!(
            "{}: expected grayscale PNG, found {:?}",
            path.display(),
            info.color_type
        )));
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let n = width * height;
    let samples: Vec<u16> = match info.bit_depth {
        png::BitDepth::Sixteen => buf[..n * 2]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]))
            .collect(),
        png::BitDepth::Eight => buf[..n].iter().map(|&b| b as u16).collect(),
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported bit depth {other:?}",
                path.display()
            )))
        }
    };
    Ok(GrayPng {
        width,
        height,
        bit_depth: info.bit_depth as u8,
        samples,
    })
}
