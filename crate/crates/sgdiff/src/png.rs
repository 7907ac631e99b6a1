//! PNG round trip for images in the model's `[-1, 1]` range.
//!
//! Quantization maps x to round(127.5 * (x + 1)) clamped to 8 bits; the
//! inverse divides back, so a save/load cycle costs at most half a
//! quantization step per channel.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{AppError, Result};

pub fn quantize(x: f64) -> u8 {
    let v = (127.5 * (x + 1.0)).round();
    v.clamp(0.0, 255.0) as u8
}

pub fn dequantize(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// Encode a row-major `[res*res, 3]` image to PNG bytes.
pub fn encode(img: &[f64], res: usize) -> Result<Vec<u8>> {
    if img.len() != res * res * 3 {
        return Err(AppError::Data(format!(
            "image buffer holds {} values, expected {}",
            img.len(),
            res * res * 3
        )));
    }
    let raw: Vec<u8> = img.iter().map(|&x| quantize(x)).collect();
    let rgb = RgbImage::from_raw(res as u32, res as u32, raw)
        .expect("raw buffer length was checked above");
    let mut bytes = Vec::new();
    rgb.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|e| AppError::Data(format!("png encode failed: {}", e)))?;
    Ok(bytes)
}

pub fn write(path: &Path, img: &[f64], res: usize) -> Result<()> {
    let bytes = encode(img, res)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Decode a PNG back into the `[-1, 1]` range. Returns the pixel data and
/// the square resolution.
pub fn read(path: &Path) -> Result<(Vec<f64>, usize)> {
    let bytes = std::fs::read(path)
        .map_err(|e| AppError::Data(format!("cannot read {}: {}", path.display(), e)))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| AppError::Data(format!("{}: {}", path.display(), e)))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w != h {
        return Err(AppError::Data(format!(
            "{} is {}x{}, expected a square image",
            path.display(),
            w,
            h
        )));
    }
    let data = img.into_raw().iter().map(|&v| dequantize(v)).collect();
    Ok((data, w))
}
