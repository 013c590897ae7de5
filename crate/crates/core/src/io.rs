//! On-disk formats: `IDEP` depth maps and 8-bit PNG images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::DepthMap;
use crate::grid::{Grid, RgbImage};

pub const DEPTH_MAGIC: &[u8; 4] = b"IDEP";

/// `IDEP` layout: magic, u32 width, u32 height, then little-endian f32
/// row-major. Invalid pixels are written as NaN.
pub fn encode_depth(depth: &DepthMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * depth.values.len());
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&(depth.width() as u32).to_le_bytes());
    out.extend_from_slice(&(depth.height() as u32).to_le_bytes());
    for (&d, &ok) in depth.values.iter().zip(depth.valid.iter()) {
        let d = if ok { d } else { f32::NAN };
        out.extend_from_slice(&d.to_le_bytes());
    }
    out
}

/// Parses an `IDEP` buffer; `path` only labels errors.
pub fn decode_depth(bytes: &[u8], path: &Path) -> Result<DepthMap> {
    if bytes.len() < 12 || &bytes[..4] != DEPTH_MAGIC {
        return Err(Error::format(path, "missing IDEP magic"));
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(12));
    if expected != Some(bytes.len()) {
        return Err(Error::format(
            path,
            format!(
                "{width}x{height} header does not match {} payload bytes",
                bytes.len().saturating_sub(12)
            ),
        ));
    }
    let values = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(DepthMap::new(Grid::from_vec(width, height, values)))
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    fs::write(path, encode_depth(depth)).map_err(|e| Error::io(path, e))
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_depth(&bytes, path)
}

#[inline]
fn to_u8(x: f32) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn rgb_to_rgba8(img: &RgbImage) -> Vec<u8> {
    img.iter()
        .flat_map(|px| [to_u8(px[0]), to_u8(px[1]), to_u8(px[2]), 255])
        .collect()
}

pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    let data: Vec<u8> = img.iter().flat_map(|px| px.map(to_u8)).collect();
    image::save_buffer(
        path,
        &data,
        img.width() as u32,
        img.height() as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| Error::format(path, e.to_string()))
}

/// Values in `[0, 1]` map to 0..=255.
pub fn write_gray_png(path: &Path, img: &Grid<f32>) -> Result<()> {
    let data: Vec<u8> = img.iter().map(|&x| to_u8(x)).collect();
    image::save_buffer(
        path,
        &data,
        img.width() as u32,
        img.height() as u32,
        image::ExtendedColorType::L8,
    )
    .map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .map(|p| p.0.map(|c| c as f32 / 255.0))
        .collect();
    Ok(Grid::from_vec(w as usize, h as usize, data))
}

/// Depth rendered as an 8-bit image, near = bright, invalid = black.
pub fn depth_visualization(depth: &DepthMap, near: f32, far: f32) -> Grid<f32> {
    depth.values.map(|&d| {
        if d.is_finite() && d > 0.0 {
            1.0 - ((d - near) / (far - near)).clamp(0.0, 1.0) * 0.9
        } else {
            0.0
        }
    })
}
