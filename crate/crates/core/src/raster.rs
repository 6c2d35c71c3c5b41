//! Image and label rasters.
//!
//! All dense arrays in this crate are stored channels-first: an image is
//! `(channels, height, width)` and a label mask is `(height, width)`.

use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, Rgba};
use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};

/// On-disk value marking an ignored label pixel in index rasters.
pub const IGNORE_ON_DISK: u8 = 255;

/// A multi-channel image with intensities normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    pixels: Array3<f32>,
    /// Free-form provenance tag, passed through untouched.
    pub resolution_tag: String,
}

impl RasterImage {
    pub fn new(pixels: Array3<f32>) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("empty raster {c}x{h}x{w}")));
        }
        if let Some(v) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            pixels,
            resolution_tag: String::new(),
        })
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.resolution_tag = tag.into();
        self
    }

    pub fn pixels(&self) -> ArrayView3<'_, f32> {
        self.pixels.view()
    }

    pub fn into_pixels(self) -> Array3<f32> {
        self.pixels
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn crop(&self, window: &crate::tiling::Window) -> RasterImage {
        RasterImage {
            pixels: self
                .pixels
                .slice(s![.., window.rows(), window.cols()])
                .to_owned(),
            resolution_tag: self.resolution_tag.clone(),
        }
    }

    /// Per-channel mean intensity.
    pub fn channel_means(&self) -> Vec<f64> {
        self.pixels
            .outer_iter()
            .map(|ch| ch.iter().map(|&v| v as f64).sum::<f64>() / ch.len() as f64)
            .collect()
    }
}

/// Per-pixel class indices. The in-memory ignore sentinel equals the class
/// count, one past the last valid class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    labels: Array2<u8>,
    class_count: usize,
}

impl LabelMask {
    pub fn new(labels: Array2<u8>, class_count: usize) -> Result<Self> {
        if class_count == 0 || class_count >= IGNORE_ON_DISK as usize {
            return Err(Error::InvalidArgument(format!(
                "class count {class_count} must lie in 1..255"
            )));
        }
        for ((row, col), &value) in labels.indexed_iter() {
            if value as usize > class_count {
                return Err(Error::LabelOutOfRange {
                    value,
                    row,
                    col,
                    classes: class_count,
                });
            }
        }
        Ok(Self {
            labels,
            class_count,
        })
    }

    pub fn ignore_value(&self) -> u8 {
        self.class_count as u8
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> ArrayView2<'_, u8> {
        self.labels.view()
    }

    pub fn height(&self) -> usize {
        self.labels.nrows()
    }

    pub fn width(&self) -> usize {
        self.labels.ncols()
    }

    pub fn get(&self, row: usize, col: usize) -> Option<usize> {
        let v = self.labels[[row, col]];
        (v as usize != self.class_count).then_some(v as usize)
    }

    pub fn crop(&self, window: &crate::tiling::Window) -> LabelMask {
        LabelMask {
            labels: self.labels.slice(s![window.rows(), window.cols()]).to_owned(),
            class_count: self.class_count,
        }
    }

    /// Fraction of non-ignored pixels holding each class.
    pub fn class_fractions(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.class_count];
        let mut total = 0usize;
        for &v in self.labels.iter() {
            if (v as usize) < self.class_count {
                counts[v as usize] += 1;
                total += 1;
            }
        }
        counts
            .into_iter()
            .map(|c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
            .collect()
    }

    pub fn check_shape(&self, height: usize, width: usize) -> Result<()> {
        if self.height() != height || self.width() != width {
            return Err(Error::Shape(format!(
                "label mask is {}x{}, expected {height}x{width}",
                self.height(),
                self.width()
            )));
        }
        Ok(())
    }
}

/// Path of the label raster paired with an image, `<stem>_labels.png`.
pub fn sidecar_label_path(image_path: &Path) -> PathBuf {
    let stem = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    image_path.with_file_name(format!("{stem}_labels.png"))
}

/// Loads an image and, when a `<stem>_labels.png` sidecar exists, its labels.
pub fn load_raster(path: &Path, class_count: usize) -> Result<(RasterImage, Option<LabelMask>)> {
    let image = load_image(path)?;
    let label_path = sidecar_label_path(path);
    let labels = if label_path.exists() {
        let labels = load_labels(&label_path, class_count)?;
        labels.check_shape(image.height(), image.width())?;
        Some(labels)
    } else {
        None
    };
    Ok((image, labels))
}

pub fn load_image(path: &Path) -> Result<RasterImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map(|img| img.with_tag(path.display().to_string()))
}

/// Decodes PNG or TIFF bytes into a normalized raster.
pub fn decode_image(bytes: &[u8]) -> Result<RasterImage> {
    let dynamic = image::load_from_memory(bytes)?;
    let (w, h) = (dynamic.width() as usize, dynamic.height() as usize);
    let pixels = match dynamic {
        DynamicImage::ImageLuma8(buf) => from_interleaved(buf.as_raw(), 1, h, w, 255.0),
        DynamicImage::ImageLumaA8(buf) => from_interleaved(buf.as_raw(), 2, h, w, 255.0),
        DynamicImage::ImageRgb8(buf) => from_interleaved(buf.as_raw(), 3, h, w, 255.0),
        DynamicImage::ImageRgba8(buf) => from_interleaved(buf.as_raw(), 4, h, w, 255.0),
        DynamicImage::ImageLuma16(buf) => from_interleaved(buf.as_raw(), 1, h, w, 65535.0),
        DynamicImage::ImageRgb16(buf) => from_interleaved(buf.as_raw(), 3, h, w, 65535.0),
        DynamicImage::ImageRgba16(buf) => from_interleaved(buf.as_raw(), 4, h, w, 65535.0),
        other => {
            let rgb = other.to_rgb32f();
            let mut arr = Array3::zeros((3, h, w));
            for (x, y, p) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    arr[[c, y as usize, x as usize]] = p.0[c].clamp(0.0, 1.0);
                }
            }
            arr
        }
    };
    RasterImage::new(pixels)
}

fn from_interleaved<T: Copy + Into<f32>>(
    raw: &[T],
    channels: usize,
    h: usize,
    w: usize,
    max: f32,
) -> Array3<f32> {
    Array3::from_shape_fn((channels, h, w), |(c, y, x)| {
        raw[(y * w + x) * channels + c].into() / max
    })
}

/// Encodes the raster as 8-bit PNG. One, three and four channel images
/// are supported.
pub fn encode_png(image: &RasterImage) -> Result<Vec<u8>> {
    let (c, h, w) = image.pixels.dim();
    let q = |ch: usize, y: usize, x: usize| -> u8 {
        (image.pixels[[ch, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8
    };
    let dynamic = match c {
        1 => DynamicImage::ImageLuma8(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            Luma([q(0, y as usize, x as usize)])
        })),
        3 => DynamicImage::ImageRgb8(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([q(0, y, x), q(1, y, x), q(2, y, x)])
        })),
        4 => DynamicImage::ImageRgba8(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgba([q(0, y, x), q(1, y, x), q(2, y, x), q(3, y, x)])
        })),
        other => {
            return Err(Error::InvalidArgument(format!(
                "cannot encode a {other}-channel raster as PNG"
            )))
        }
    };
    let mut out = Vec::new();
    dynamic.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)?;
    Ok(out)
}

pub fn save_image(image: &RasterImage, path: &Path) -> Result<()> {
    let bytes = encode_png(image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a single-channel index raster. The value 255 marks ignored pixels.
pub fn load_labels(path: &Path, class_count: usize) -> Result<LabelMask> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_labels(&bytes, class_count)
}

pub fn decode_labels(bytes: &[u8], class_count: usize) -> Result<LabelMask> {
    let gray = image::load_from_memory(bytes)?.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let mut labels = Array2::zeros((h, w));
    for (x, y, p) in gray.enumerate_pixels() {
        let v = p.0[0];
        let (row, col) = (y as usize, x as usize);
        labels[[row, col]] = if v == IGNORE_ON_DISK {
            class_count as u8
        } else if v as usize >= class_count {
            return Err(Error::LabelOutOfRange {
                value: v,
                row,
                col,
                classes: class_count,
            });
        } else {
            v
        };
    }
    LabelMask::new(labels, class_count)
}

pub fn encode_labels(labels: &LabelMask) -> Result<Vec<u8>> {
    let (h, w) = labels.labels.dim();
    let ignore = labels.ignore_value();
    let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = labels.labels[[y as usize, x as usize]];
        Luma([if v == ignore { IGNORE_ON_DISK } else { v }])
    });
    let mut out = Vec::new();
    DynamicImage::ImageLuma8(img)
        .write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)?;
    Ok(out)
}

pub fn save_labels(labels: &LabelMask, path: &Path) -> Result<()> {
    let bytes = encode_labels(labels)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Bilinear resampling with half-pixel centers and no anti-aliasing prefilter.
pub fn resize_bilinear(image: &RasterImage, height: usize, width: usize) -> Result<RasterImage> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument("target size must be non-zero".into()));
    }
    let (c, h, w) = image.pixels.dim();
    let sy = h as f32 / height as f32;
    let sx = w as f32 / width as f32;
    let mut out = Array3::zeros((c, height, width));
    for y in 0..height {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f32;
        for x in 0..width {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f32;
            for ch in 0..c {
                let p = &image.pixels;
                let top = p[[ch, y0, x0]] * (1.0 - tx) + p[[ch, y0, x1]] * tx;
                let bottom = p[[ch, y1, x0]] * (1.0 - tx) + p[[ch, y1, x1]] * tx;
                out[[ch, y, x]] = (top * (1.0 - ty) + bottom * ty).clamp(0.0, 1.0);
            }
        }
    }
    Ok(RasterImage {
        pixels: out,
        resolution_tag: image.resolution_tag.clone(),
    })
}

/// Nearest-neighbour resampling for label masks.
pub fn resize_nearest(labels: &LabelMask, height: usize, width: usize) -> LabelMask {
    let (h, w) = labels.labels.dim();
    let out = Array2::from_shape_fn((height, width), |(y, x)| {
        let sy = ((y as f64 + 0.5) * h as f64 / height as f64) as usize;
        let sx = ((x as f64 + 0.5) * w as f64 / width as f64) as usize;
        labels.labels[[sy.min(h - 1), sx.min(w - 1)]]
    });
    LabelMask {
        labels: out,
        class_count: labels.class_count,
    }
}

/// Fixed display palette, indexed by class.
pub fn class_palette(class_count: usize) -> Vec<[u8; 3]> {
    const BASE: [[u8; 3]; 8] = [
        [255, 255, 255],
        [0, 0, 255],
        [0, 255, 255],
        [0, 255, 0],
        [255, 255, 0],
        [255, 0, 0],
        [128, 0, 128],
        [255, 128, 0],
    ];
    (0..class_count).map(|k| BASE[k % BASE.len()]).collect()
}
