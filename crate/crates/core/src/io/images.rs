//! PNG reading and writing.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::metrics::Image;

/// Loads an RGBA (or RGB) PNG and composites it over `background`.
pub fn load_rgba_over(path: &Path, background: [f64; 3]) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?
        .into_rgba32f();
    let (w, h) = img.dimensions();
    let mut data = Vec::with_capacity((w * h * 3) as usize);
    for px in img.pixels() {
        let a = px[3].clamp(0.0, 1.0) as f64;
        for c in 0..3 {
            data.push(px[c] as f64 * a + background[c] * (1.0 - a));
        }
    }
    Image::from_clamped(w as usize, h as usize, data)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_rgb_png(path: &Path, image: &Image) -> Result<()> {
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(
        image.width() as u32,
        image.height() as u32,
        image.data().iter().map(|&v| to_u8(v)).collect(),
    )
    .expect("buffer length matches dimensions");
    buf.save(path)?;
    Ok(())
}

/// Writes `depth / max_depth` as a 16-bit grayscale PNG.
pub fn save_depth_png(path: &Path, width: usize, height: usize, depth: &[f64], max_depth: f64) -> Result<()> {
    if depth.len() != width * height {
        return Err(Error::shape("depth map", width * height, depth.len()));
    }
    if !(max_depth > 0.0) {
        return Err(Error::InvalidInput("depth scale must be positive".into()));
    }
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(
        width as u32,
        height as u32,
        depth
            .iter()
            .map(|&d| ((d / max_depth).clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect(),
    )
    .expect("buffer length matches dimensions");
    buf.save(path)?;
    Ok(())
}

/// Writes a single-channel map in `[0, 1]` as 8-bit grayscale.
pub fn save_gray_png(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::shape("gray map", width * height, values.len()));
    }
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(
        width as u32,
        height as u32,
        values.iter().map(|&v| to_u8(v as f32)).collect(),
    )
    .expect("buffer length matches dimensions");
    buf.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgba_compositing_and_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let rgba: ImageBuffer<image::Rgba<u8>, Vec<u8>> =
            ImageBuffer::from_raw(2, 1, vec![0, 0, 0, 0, 255, 0, 0, 255]).unwrap();
        rgba.save(&path).unwrap();
        let img = load_rgba_over(&path, [1.0; 3]).unwrap();
        assert_eq!(img.pixel(0, 0), [1.0, 1.0, 1.0]);
        assert_eq!(img.pixel(1, 0), [1.0, 0.0, 0.0]);

        let out = dir.path().join("b.png");
        save_rgb_png(&out, &img).unwrap();
        let back = load_rgba_over(&out, [0.0; 3]).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn depth_is_sixteen_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        save_depth_png(&path, 2, 1, &[0.0, 2.0], 4.0).unwrap();
        let img = image::open(&path).unwrap().into_luma16();
        assert_eq!(img.get_pixel(1, 0)[0], 32768);
        assert!(save_depth_png(&path, 2, 1, &[0.0], 4.0).is_err());
    }
}
