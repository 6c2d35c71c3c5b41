use ndarray::{s, Array2, Array3, ArrayView3, Axis};

use crate::error::{Error, Result};
use crate::tiling::Window;

/// Per-pixel class probabilities, channels-first `(classes, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMap {
    probabilities: Array3<f32>,
    /// Marks the initial prediction used as the regularization anchor.
    pub frozen: bool,
}

impl PredictionMap {
    pub fn new(probabilities: Array3<f32>) -> Result<Self> {
        let (n, h, w) = probabilities.dim();
        if n == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("empty prediction {n}x{h}x{w}")));
        }
        Ok(Self {
            probabilities,
            frozen: false,
        })
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn probabilities(&self) -> ArrayView3<'_, f32> {
        self.probabilities.view()
    }

    pub fn probabilities_mut(&mut self) -> &mut Array3<f32> {
        &mut self.probabilities
    }

    pub fn class_count(&self) -> usize {
        self.probabilities.dim().0
    }

    pub fn height(&self) -> usize {
        self.probabilities.dim().1
    }

    pub fn width(&self) -> usize {
        self.probabilities.dim().2
    }

    /// Most probable class per pixel; ties go to the lower class index.
    pub fn argmax(&self) -> Array2<u8> {
        let (n, h, w) = self.probabilities.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            let mut best = 0;
            for k in 1..n {
                if self.probabilities[[k, y, x]] > self.probabilities[[best, y, x]] {
                    best = k;
                }
            }
            best as u8
        })
    }

    /// Largest class probability per pixel.
    pub fn max_probability(&self) -> Array2<f32> {
        self.probabilities
            .map_axis(Axis(0), |v| v.iter().cloned().fold(f32::MIN, f32::max))
    }

    pub fn crop(&self, window: &Window) -> PredictionMap {
        PredictionMap {
            probabilities: self
                .probabilities
                .slice(s![.., window.rows(), window.cols()])
                .to_owned(),
            frozen: self.frozen,
        }
    }

    /// Overwrites the window with `patch`.
    pub fn paste(&mut self, window: &Window, patch: &PredictionMap) {
        self.probabilities
            .slice_mut(s![.., window.rows(), window.cols()])
            .assign(&patch.probabilities);
    }
}
