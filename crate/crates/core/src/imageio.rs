//! PNG encoding of RGB frames and 16-bit millimeter depth maps.

use std::io::Cursor;

use crate::error::{Error, Result};

/// Depth is stored as unsigned millimeters; the far-plane sentinel (10 m)
/// fits comfortably.
pub const DEPTH_SCALE_MM: f64 = 1000.0;

fn png_err(e: impl std::fmt::Display) -> Error {
    Error::Format(format!("png: {e}"))
}

fn encode(width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        enc.set_compression(png::Compression::Fast);
        let mut w = enc.write_header().map_err(png_err)?;
        w.write_image_data(data).map_err(png_err)?;
        w.finish().map_err(png_err)?;
    }
    Ok(out)
}

fn decode(bytes: &[u8], color: png::ColorType, depth: png::BitDepth) -> Result<(usize, usize, Vec<u8>)> {
    let dec = png::Decoder::new(Cursor::new(bytes));
    let mut reader = dec.read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("png: image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.color_type != color || info.bit_depth != depth {
        return Err(Error::Format(format!(
            "png: expected {color:?}/{depth:?}, found {:?}/{:?}",
            info.color_type, info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    Ok((info.height as usize, info.width as usize, buf))
}

/// Row-major `H x W x 3` bytes to PNG.
pub fn encode_rgb(height: usize, width: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != height * width * 3 {
        return Err(Error::Format(format!(
            "rgb buffer has {} bytes, expected {}",
            rgb.len(),
            height * width * 3
        )));
    }
    encode(width, height, png::ColorType::Rgb, png::BitDepth::Eight, rgb)
}

/// Returns `(height, width, rgb)`.
pub fn decode_rgb(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    decode(bytes, png::ColorType::Rgb, png::BitDepth::Eight)
}

pub fn depth_to_mm(d: f32) -> u16 {
    (d as f64 * DEPTH_SCALE_MM).round().clamp(0.0, u16::MAX as f64) as u16
}

pub fn mm_to_depth(mm: u16) -> f32 {
    (mm as f64 / DEPTH_SCALE_MM) as f32
}

/// Rounds a metric depth map to whole millimeters, matching what a
/// round trip through [`encode_depth`] yields.
pub fn quantize_depth(depth: &[f32]) -> Vec<f32> {
    depth.iter().map(|&d| mm_to_depth(depth_to_mm(d))).collect()
}

/// Metric depth to a 16-bit grayscale PNG in millimeters.
pub fn encode_depth(height: usize, width: usize, depth: &[f32]) -> Result<Vec<u8>> {
    if depth.len() != height * width {
        return Err(Error::Format(format!(
            "depth buffer has {} values, expected {}",
            depth.len(),
            height * width
        )));
    }
    let mut be = Vec::with_capacity(depth.len() * 2);
    for &d in depth {
        be.extend_from_slice(&depth_to_mm(d).to_be_bytes());
    }
    encode(width, height, png::ColorType::Grayscale, png::BitDepth::Sixteen, &be)
}

/// Returns `(height, width, depth in meters)`.
pub fn decode_depth(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let (h, w, raw) = decode(bytes, png::ColorType::Grayscale, png::BitDepth::Sixteen)?;
    let depth = raw
        .chunks_exact(2)
        .map(|c| mm_to_depth(u16::from_be_bytes([c[0], c[1]])))
        .collect();
    Ok((h, w, depth))
}

/// Writes an RGB PNG to disk.
pub fn save_rgb(path: &std::path::Path, height: usize, width: usize, rgb: &[u8]) -> Result<()> {
    std::fs::write(path, encode_rgb(height, width, rgb)?)?;
    Ok(())
}
