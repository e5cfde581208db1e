//! 8-bit grayscale PNG renders.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use super::RocCurve;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn write_gray_png(path: &Path, h: usize, w: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != h * w {
        return Err(Error::dim(format!("{} pixels for a {h}x{w} image", pixels.len())));
    }
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(pixels)?;
    writer.finish()?;
    Ok(())
}

fn line(img: &mut [u8], size: usize, (x0, y0): (i64, i64), (x1, y1): (i64, i64), value: u8) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if (0..size as i64).contains(&x) && (0..size as i64).contains(&y) {
            img[y as usize * size + x as usize] = value;
        }
        if x == x1 && y == y1 {
            return;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// `size x size` plot: white background, gray chance diagonal, black
/// curve; FPR runs left to right, TPR bottom to top.
pub fn roc_png(curve: &RocCurve, size: usize) -> Vec<u8> {
    let mut img = vec![255u8; size * size];
    let top = size as f64 - 1.0;
    let px = |fpr: f64, tpr: f64| ((fpr * top).round() as i64, ((1.0 - tpr) * top).round() as i64);
    line(&mut img, size, px(0.0, 0.0), px(1.0, 1.0), 170);
    for w in curve.points.windows(2) {
        line(&mut img, size, px(w[0].fpr, w[0].tpr), px(w[1].fpr, w[1].tpr), 0);
    }
    img
}

/// Maximum-intensity projection of a `[.., H, W, D]` volume along depth,
/// values in `[0, 1]` mapped to 0-255. Returns `(H, W, pixels)`.
pub fn mip_png(volume: &Tensor<f32>) -> Result<(usize, usize, Vec<u8>)> {
    let d = volume.dims();
    if d.len() < 3 || d[..d.len() - 3].iter().any(|&x| x != 1) {
        return Err(Error::dim(format!("projection needs a single volume, got {}", volume.shape())));
    }
    let (h, w, depth) = (d[d.len() - 3], d[d.len() - 2], d[d.len() - 1]);
    let pixels = volume
        .data()
        .chunks(depth)
        .map(|ray| {
            let m = ray.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            (m.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    Ok((h, w, pixels))
}
