//! PNG output: image grids and linear interpolation strips.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::image::Image;

/// Maps a `[-1, 1]` value to `0..=255`.
pub fn to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) as f64 + 1.0) * 127.5).round() as u8
}

/// Monotone linear interpolation, exact at both endpoints.
pub fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if (a <= 0.0 && b >= 0.0) || (a >= 0.0 && b <= 0.0) {
        return t * b + (1.0 - t) * a;
    }
    if t == 1.0 {
        return b;
    }
    let x = a + t * (b - a);
    if (t > 1.0) == (b > a) {
        x.max(b)
    } else {
        x.min(b)
    }
}

/// Frames `x_t = (1 - t)·x + t·x̂` for `t = k / (steps - 1)`.
pub fn interpolation_frames(x: &Image, x_hat: &Image, steps: usize) -> Result<Vec<Image>> {
    if steps < 2 {
        return Err(Error::validation(format!("interpolation needs at least 2 steps, got {steps}")));
    }
    if x.shape() != x_hat.shape() {
        return Err(Error::validation(format!(
            "interpolation endpoints differ in shape: {:?} vs {:?}",
            x.shape(),
            x_hat.shape()
        )));
    }
    let (h, w, c) = x.shape();
    (0..steps)
        .map(|k| {
            let t = k as f64 / (steps - 1) as f64;
            let data = x.data().iter().zip(x_hat.data()).map(|(&a, &b)| lerp(a as f64, b as f64, t) as f32).collect();
            Image::new(h, w, c, data)
        })
        .collect()
}

/// Lays out rows of equally sized images with `pad` pixels of black between
/// cells. Rows may have different lengths.
pub fn grid(rows: &[Vec<Image>], pad: usize) -> Result<DynamicImage> {
    let first = rows
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::validation("cannot render an empty grid"))?;
    let (h, w, c) = first.shape();
    if c != 1 && c != 3 {
        return Err(Error::validation(format!("cannot render {c}-channel images")));
    }
    if rows.iter().flatten().any(|i| i.shape() != (h, w, c)) {
        return Err(Error::validation("grid cells differ in shape"));
    }
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let gw = cols * w + (cols + 1) * pad;
    let gh = rows.len() * h + (rows.len() + 1) * pad;
    let cells = rows.iter().enumerate().flat_map(|(r, row)| {
        row.iter().enumerate().map(move |(k, img)| (pad + k * (w + pad), pad + r * (h + pad), img))
    });
    if c == 1 {
        let mut out = GrayImage::new(gw as u32, gh as u32);
        for (ox, oy, img) in cells {
            for (y, x) in (0..h).flat_map(|y| (0..w).map(move |x| (y, x))) {
                out.put_pixel((ox + x) as u32, (oy + y) as u32, image::Luma([to_u8(img.get(0, y, x))]));
            }
        }
        Ok(DynamicImage::ImageLuma8(out))
    } else {
        let mut out = RgbImage::new(gw as u32, gh as u32);
        for (ox, oy, img) in cells {
            for (y, x) in (0..h).flat_map(|y| (0..w).map(move |x| (y, x))) {
                let px = [to_u8(img.get(0, y, x)), to_u8(img.get(1, y, x)), to_u8(img.get(2, y, x))];
                out.put_pixel((ox + x) as u32, (oy + y) as u32, image::Rgb(px));
            }
        }
        Ok(DynamicImage::ImageRgb8(out))
    }
}

/// Single-channel image as an 8-bit grayscale buffer.
pub fn to_gray(img: &Image) -> Result<GrayImage> {
    if img.channels() != 1 {
        return Err(Error::validation("expected a single-channel image"));
    }
    let bytes = img.data().iter().map(|&v| to_u8(v)).collect();
    Ok(GrayImage::from_raw(img.width() as u32, img.height() as u32, bytes).expect("buffer matches dimensions"))
}

pub fn save_png(img: &DynamicImage, path: &Path) -> Result<()> {
    let mut bytes = std::io::Cursor::new(Vec::new());
    img.write_to(&mut bytes, ImageFormat::Png)?;
    crate::io::write_atomic(path, bytes.get_ref())
}
