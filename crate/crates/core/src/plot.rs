//! IoU-versus-budget line charts as PNG files.
//!
//! Axes only, no text: x spans budget 0..=max length, y spans [0, 1].
//! Curve colours follow [`crate::raster::class_palette`] skipping white.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::raster::class_palette;

const MARGIN: u32 = 24;

pub fn curve_color(index: usize) -> [u8; 3] {
    let palette = class_palette(8);
    palette[1 + index % (palette.len() - 1)]
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
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

/// Renders one polyline per curve; `curves[i][b]` is the IoU after `b` queries.
pub fn render_curves(curves: &[Vec<f64>], width: u32, height: u32) -> Result<RgbImage> {
    if width <= 2 * MARGIN || height <= 2 * MARGIN {
        return Err(Error::InvalidArgument(format!("plot size {width}x{height} too small")));
    }
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let (left, right) = (MARGIN as i64, (width - MARGIN) as i64);
    let (top, bottom) = (MARGIN as i64, (height - MARGIN) as i64);
    let axis = Rgb([0, 0, 0]);
    line(&mut img, (left, bottom), (right, bottom), axis);
    line(&mut img, (left, bottom), (left, top), axis);
    let steps = curves.iter().map(|c| c.len()).max().unwrap_or(1).saturating_sub(1).max(1);
    let to_px = |b: usize, v: f64| {
        let x = left + ((right - left) as f64 * b as f64 / steps as f64).round() as i64;
        let y = bottom - ((bottom - top) as f64 * v.clamp(0.0, 1.0)).round() as i64;
        (x, y)
    };
    for (i, curve) in curves.iter().enumerate() {
        let color = Rgb(curve_color(i));
        for b in 1..curve.len() {
            line(&mut img, to_px(b - 1, curve[b - 1]), to_px(b, curve[b]), color);
        }
        if curve.len() == 1 {
            let (x, y) = to_px(0, curve[0]);
            img.put_pixel(x as u32, y as u32, color);
        }
    }
    Ok(img)
}

pub fn save_curves(curves: &[Vec<f64>], path: &Path) -> Result<()> {
    render_curves(curves, 640, 400)?
        .save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}
