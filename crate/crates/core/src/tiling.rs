//! Overlapping tile grids and probability stitching.

use std::ops::Range;

use ndarray::{s, Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A rectangular pixel window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Window {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Window {
    pub fn new(row: usize, col: usize, height: usize, width: usize) -> Self {
        Self {
            row,
            col,
            height,
            width,
        }
    }

    pub fn rows(&self) -> Range<usize> {
        self.row..self.row + self.height
    }

    pub fn cols(&self) -> Range<usize> {
        self.col..self.col + self.width
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.rows().contains(&row) && self.cols().contains(&col)
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub grid_row: usize,
    pub grid_col: usize,
    pub window: Window,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub tile_size: usize,
    pub overlap: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Row-major order.
    pub tiles: Vec<Tile>,
}

/// Window origins along one axis: stride `tile - overlap`, last window
/// clamped so it ends at the border.
fn axis_origins(extent: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut origins = Vec::new();
    let mut pos = 0;
    loop {
        origins.push(pos);
        if pos + tile >= extent {
            break;
        }
        pos += stride;
        if pos + tile > extent {
            pos = extent - tile;
        }
    }
    origins
}

impl TileGrid {
    pub fn new(height: usize, width: usize, tile_size: usize, overlap: usize) -> Result<Self> {
        if tile_size == 0 || tile_size <= overlap {
            return Err(Error::InvalidArgument(format!(
                "tile size {tile_size} must exceed overlap {overlap}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::Shape("cannot tile an empty image".into()));
        }
        if tile_size > height.min(width) {
            return Ok(Self {
                tile_size,
                overlap,
                image_height: height,
                image_width: width,
                tiles: vec![Tile {
                    grid_row: 0,
                    grid_col: 0,
                    window: Window::new(0, 0, height, width),
                }],
            });
        }
        let stride = tile_size - overlap;
        let rows = axis_origins(height, tile_size, stride);
        let cols = axis_origins(width, tile_size, stride);
        let mut tiles = Vec::with_capacity(rows.len() * cols.len());
        for (gr, &r) in rows.iter().enumerate() {
            for (gc, &c) in cols.iter().enumerate() {
                tiles.push(Tile {
                    grid_row: gr,
                    grid_col: gc,
                    window: Window::new(r, c, tile_size, tile_size),
                });
            }
        }
        Ok(Self {
            tile_size,
            overlap,
            image_height: height,
            image_width: width,
            tiles,
        })
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn windows(&self) -> impl Iterator<Item = Window> + '_ {
        self.tiles.iter().map(|t| t.window)
    }

    /// Reassembles tiles by taking, for every pixel, the value from the first
    /// window that covers it.
    pub fn stitch_first(&self, tiles: &[Array3<f32>]) -> Result<Array3<f32>> {
        if tiles.len() != self.tiles.len() {
            return Err(Error::Shape(format!(
                "{} tiles supplied for a grid of {}",
                tiles.len(),
                self.tiles.len()
            )));
        }
        let channels = tiles.first().map(|t| t.dim().0).unwrap_or(0);
        let mut out = Array3::<f32>::zeros((channels, self.image_height, self.image_width));
        let mut filled = Array2::<bool>::from_elem((self.image_height, self.image_width), false);
        for (tile, data) in self.tiles.iter().zip(tiles) {
            let w = tile.window;
            for r in 0..w.height {
                for c in 0..w.width {
                    let (y, x) = (w.row + r, w.col + c);
                    if !filled[[y, x]] {
                        filled[[y, x]] = true;
                        for ch in 0..channels {
                            out[[ch, y, x]] = data[[ch, r, c]];
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Reassembles channels-first tiles by averaging overlapping values.
    pub fn stitch_mean(&self, tiles: &[Array3<f32>]) -> Result<Array3<f32>> {
        if tiles.len() != self.tiles.len() {
            return Err(Error::Shape(format!(
                "{} tiles supplied for a grid of {}",
                tiles.len(),
                self.tiles.len()
            )));
        }
        let channels = tiles.first().map(|t| t.dim().0).unwrap_or(0);
        let mut sum = Array3::<f32>::zeros((channels, self.image_height, self.image_width));
        let mut count = Array2::<f32>::zeros((self.image_height, self.image_width));
        for (tile, data) in self.tiles.iter().zip(tiles) {
            let w = tile.window;
            if data.dim() != (channels, w.height, w.width) {
                return Err(Error::Shape(format!(
                    "tile data {:?} does not match window {}x{}",
                    data.dim(),
                    w.height,
                    w.width
                )));
            }
            sum.slice_mut(s![.., w.rows(), w.cols()]).zip_mut_with(data, |a, b| *a += *b);
            count.slice_mut(s![w.rows(), w.cols()]).mapv_inplace(|c| c + 1.0);
        }
        for mut ch in sum.outer_iter_mut() {
            ch.zip_mut_with(&count, |v, c| *v /= *c);
        }
        Ok(sum)
    }
}

/// Tiles an image. A tile larger than the shorter side yields a single
/// full-image window.
pub fn tile(image: ArrayView3<'_, f32>, tile_size: usize, overlap: usize) -> Result<TileGrid> {
    let (_, h, w) = image.dim();
    TileGrid::new(h, w, tile_size, overlap)
}
