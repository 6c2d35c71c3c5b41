//! Click annotations and their dense encodings.

mod guided;

pub use guided::{box_mean, guided_filter};

use std::path::Path;

use ndarray::{Array2, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prediction::PredictionMap;
use crate::raster::{LabelMask, RasterImage};
use crate::spatial::{component_containing, squared_distance_transform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Human,
    Simulated,
}

/// A labelled point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClickAnnotation {
    pub row: usize,
    pub col: usize,
    pub class_id: usize,
    pub origin: Origin,
}

impl ClickAnnotation {
    pub fn new(row: usize, col: usize, class_id: usize, origin: Origin) -> Self {
        Self {
            row,
            col,
            class_id,
            origin,
        }
    }

    pub fn check(&self, height: usize, width: usize, classes: usize) -> Result<()> {
        if self.row >= height || self.col >= width {
            return Err(Error::ClickOutOfBounds {
                row: self.row,
                col: self.col,
                height,
                width,
            });
        }
        if self.class_id >= classes {
            return Err(Error::ClassOutOfRange {
                class_id: self.class_id,
                classes,
            });
        }
        Ok(())
    }

    /// The same click expressed in a window's local coordinates.
    pub fn relative_to(&self, window: &crate::tiling::Window) -> Option<ClickAnnotation> {
        window.contains(self.row, self.col).then(|| ClickAnnotation {
            row: self.row - window.row,
            col: self.col - window.col,
            ..*self
        })
    }
}

/// Reads a JSON list of click records.
pub fn read_clicks(path: &Path) -> Result<Vec<ClickAnnotation>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_clicks(path: &Path, clicks: &[ClickAnnotation]) -> Result<()> {
    let text = serde_json::to_string_pretty(clicks)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingKind {
    BinaryDisk,
    DistanceTransform,
    GuidedFilter,
    ConnectedPrediction,
    ConnectedGroundtruth,
}

impl EncodingKind {
    pub fn name(self) -> &'static str {
        match self {
            EncodingKind::BinaryDisk => "binary_disk",
            EncodingKind::DistanceTransform => "distance_transform",
            EncodingKind::GuidedFilter => "guided_filter",
            EncodingKind::ConnectedPrediction => "connected_prediction",
            EncodingKind::ConnectedGroundtruth => "connected_groundtruth",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub kind: EncodingKind,
    /// Disk radius in pixels. Guided filtering refines a distance
    /// transform of this radius.
    pub radius: f32,
    pub filter_radius: usize,
    pub filter_epsilon: f32,
}

impl EncodingConfig {
    pub fn new(kind: EncodingKind) -> Self {
        let radius = match kind {
            EncodingKind::BinaryDisk => 1.5,
            _ => 10.0,
        };
        Self {
            kind,
            radius,
            filter_radius: 4,
            filter_epsilon: 1e-2,
        }
    }

    pub fn distance_transform() -> Self {
        Self::new(EncodingKind::DistanceTransform)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) {
            return Err(Error::InvalidArgument("encoding radius must be > 0".into()));
        }
        Ok(())
    }
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self::distance_transform()
    }
}

/// Side information some encodings need.
#[derive(Debug, Clone, Copy)]
pub enum EncodingContext<'a> {
    None,
    Image(&'a RasterImage),
    Prediction(&'a PredictionMap),
    Labels(&'a LabelMask),
}

/// `(classes, height, width)` click encoding with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationTensor {
    channels: Array3<f32>,
}

impl AnnotationTensor {
    pub fn zeros(classes: usize, height: usize, width: usize) -> Self {
        Self {
            channels: Array3::zeros((classes, height, width)),
        }
    }

    pub fn from_array(channels: Array3<f32>) -> Self {
        Self { channels }
    }

    pub fn channels(&self) -> ArrayView3<'_, f32> {
        self.channels.view()
    }

    pub fn class_count(&self) -> usize {
        self.channels.dim().0
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.channels.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.iter().all(|&v| v == 0.0)
    }

    /// Pointwise maximum with another tensor of the same shape.
    pub fn merge_max(&mut self, other: &AnnotationTensor) {
        self.channels.zip_mut_with(&other.channels, |a, &b| *a = a.max(b));
    }
}

/// Encodes clicks into one channel per class. Multiple clicks combine by
/// pointwise maximum.
pub fn encode(
    clicks: &[ClickAnnotation],
    config: &EncodingConfig,
    shape: (usize, usize),
    classes: usize,
    context: EncodingContext<'_>,
) -> Result<AnnotationTensor> {
    config.validate()?;
    let (h, w) = shape;
    let name = config.kind.name();
    match (config.kind, &context) {
        (EncodingKind::GuidedFilter, EncodingContext::Image(img)) => {
            if img.height() != h || img.width() != w {
                return Err(Error::Shape("guide image does not match encoding shape".into()));
            }
        }
        (EncodingKind::ConnectedPrediction, EncodingContext::Prediction(p)) => {
            if p.height() != h || p.width() != w {
                return Err(Error::Shape("prediction does not match encoding shape".into()));
            }
        }
        (EncodingKind::ConnectedGroundtruth, EncodingContext::Labels(l)) => l.check_shape(h, w)?,
        (EncodingKind::BinaryDisk | EncodingKind::DistanceTransform, EncodingContext::None) => {}
        (EncodingKind::BinaryDisk | EncodingKind::DistanceTransform, _) => {
            return Err(Error::UnexpectedContext(name))
        }
        (_, _) => return Err(Error::MissingContext(name)),
    }
    for click in clicks {
        click.check(h, w, classes)?;
    }

    let mut channels = Array3::<f32>::zeros((classes, h, w));
    for class in 0..classes {
        let own: Vec<_> = clicks.iter().filter(|c| c.class_id == class).collect();
        if own.is_empty() {
            continue;
        }
        let mut plane = channels.index_axis_mut(Axis(0), class);
        match config.kind {
            EncodingKind::BinaryDisk | EncodingKind::DistanceTransform | EncodingKind::GuidedFilter => {
                let mut seeds = Array2::from_elem((h, w), false);
                for c in &own {
                    seeds[[c.row, c.col]] = true;
                }
                let dist = squared_distance_transform(&seeds).mapv(f64::sqrt);
                let r = config.radius as f64;
                let base = if config.kind == EncodingKind::BinaryDisk {
                    dist.mapv(|d| if d <= r { 1.0f32 } else { 0.0 })
                } else {
                    dist.mapv(|d| (1.0 - d / r).max(0.0) as f32)
                };
                if let (EncodingKind::GuidedFilter, EncodingContext::Image(img)) = (config.kind, &context) {
                    let filtered =
                        guided_filter(base.view(), img, config.filter_radius, config.filter_epsilon)?;
                    plane.assign(&filtered.mapv(|v| if v < 1e-6 { 0.0 } else { v.min(1.0) }));
                } else {
                    plane.assign(&base);
                }
            }
            EncodingKind::ConnectedPrediction | EncodingKind::ConnectedGroundtruth => {
                let region_labels = match context {
                    EncodingContext::Prediction(p) => p.argmax(),
                    EncodingContext::Labels(l) => l.labels().to_owned(),
                    _ => unreachable!("context checked above"),
                };
                for c in &own {
                    let target = region_labels[[c.row, c.col]];
                    let mask = region_labels.mapv(|v| v == target);
                    let comp = component_containing(&mask, (c.row, c.col));
                    plane.zip_mut_with(&comp, |v, &inside| {
                        if inside {
                            *v = 1.0
                        }
                    });
                }
            }
        }
    }
    Ok(AnnotationTensor { channels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn click(row: usize, col: usize, class_id: usize) -> ClickAnnotation {
        ClickAnnotation::new(row, col, class_id, Origin::Simulated)
    }

    #[test]
    fn empty_clicks_encode_to_zero() {
        let img = RasterImage::new(Array3::from_elem((3, 8, 8), 0.5)).unwrap();
        let labels = LabelMask::new(Array2::zeros((8, 8)), 2).unwrap();
        let pred = PredictionMap::new(Array3::from_elem((2, 8, 8), 0.5)).unwrap();
        for (kind, ctx) in [
            (EncodingKind::BinaryDisk, EncodingContext::None),
            (EncodingKind::DistanceTransform, EncodingContext::None),
            (EncodingKind::GuidedFilter, EncodingContext::Image(&img)),
            (EncodingKind::ConnectedPrediction, EncodingContext::Prediction(&pred)),
            (EncodingKind::ConnectedGroundtruth, EncodingContext::Labels(&labels)),
        ] {
            let t = encode(&[], &EncodingConfig::new(kind), (8, 8), 2, ctx).unwrap();
            assert!(t.is_empty(), "{kind:?}");
        }
    }

    #[test]
    fn distance_transform_decays_linearly() {
        let t = encode(&[click(5, 5, 0)], &EncodingConfig::distance_transform(), (20, 20), 2, EncodingContext::None)
            .unwrap();
        let ch = t.channels();
        assert_eq!(ch[[0, 5, 5]], 1.0);
        assert_eq!(ch[[0, 5, 15]], 0.0);
        assert_eq!(ch[[0, 5, 10]], 0.5);
        assert!(ch.index_axis(Axis(0), 1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn binary_disk_covers_the_3x3_block() {
        let t = encode(&[click(4, 4, 1)], &EncodingConfig::new(EncodingKind::BinaryDisk), (9, 9), 2, EncodingContext::None)
            .unwrap();
        let ones = t.channels().iter().filter(|&&v| v == 1.0).count();
        assert_eq!(ones, 9);
        assert_eq!(t.channels()[[1, 3, 3]], 1.0);
        assert_eq!(t.channels()[[1, 2, 4]], 0.0);
    }

    #[test]
    fn connected_prediction_fills_the_predicted_blob() {
        let mut probs = Array3::<f32>::zeros((2, 8, 8));
        probs.index_axis_mut(Axis(0), 0).fill(0.9);
        probs.index_axis_mut(Axis(0), 1).fill(0.1);
        let blob = [(2, 2), (2, 3), (3, 2), (3, 3)];
        for &(y, x) in &blob {
            probs[[0, y, x]] = 0.2;
            probs[[1, y, x]] = 0.8;
        }
        let pred = PredictionMap::new(probs).unwrap();
        let cfg = EncodingConfig::new(EncodingKind::ConnectedPrediction);
        let t = encode(&[click(3, 3, 1)], &cfg, (8, 8), 2, EncodingContext::Prediction(&pred)).unwrap();
        // Oracle: flood fill from the click over equal argmax values.
        let arg = pred.argmax();
        let mut expected = Array2::from_elem((8, 8), 0.0f32);
        let mut stack = vec![(3usize, 3usize)];
        while let Some((y, x)) = stack.pop() {
            if expected[[y, x]] == 1.0 || arg[[y, x]] != 1 {
                continue;
            }
            expected[[y, x]] = 1.0;
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let (ny, nx) = (y as i32 + dy, x as i32 + dx);
                    if (0..8).contains(&ny) && (0..8).contains(&nx) {
                        stack.push((ny as usize, nx as usize));
                    }
                }
            }
        }
        assert_eq!(t.channels().index_axis(Axis(0), 1), expected);
        assert_eq!(expected.iter().filter(|&&v| v == 1.0).count(), 4);
    }

    #[test]
    fn context_rules_are_enforced() {
        let img = RasterImage::new(Array3::from_elem((3, 8, 8), 0.5)).unwrap();
        let dt = EncodingConfig::distance_transform();
        assert!(matches!(
            encode(&[], &dt, (8, 8), 2, EncodingContext::Image(&img)),
            Err(Error::UnexpectedContext(_))
        ));
        let gf = EncodingConfig::new(EncodingKind::GuidedFilter);
        assert!(matches!(encode(&[], &gf, (8, 8), 2, EncodingContext::None), Err(Error::MissingContext(_))));
        assert!(matches!(
            encode(&[click(8, 0, 0)], &dt, (8, 8), 2, EncodingContext::None),
            Err(Error::ClickOutOfBounds { .. })
        ));
    }

    #[test]
    fn guided_encoding_stays_in_its_channel() {
        let img = RasterImage::new(Array3::from_shape_fn((3, 24, 24), |(c, y, x)| {
            if x < 12 { 0.2 + 0.1 * c as f32 } else { 0.8 - 0.1 * c as f32 + (y % 2) as f32 * 0.01 }
        }))
        .unwrap();
        let t = encode(&[click(10, 8, 1)], &EncodingConfig::new(EncodingKind::GuidedFilter), (24, 24), 3, EncodingContext::Image(&img))
            .unwrap();
        let ch = t.channels();
        assert!(ch.index_axis(Axis(0), 0).iter().all(|&v| v == 0.0));
        assert!(ch.index_axis(Axis(0), 2).iter().all(|&v| v == 0.0));
        assert!(ch[[1, 10, 8]] > 0.5);
        assert!(ch.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    fn arb_clicks() -> impl Strategy<Value = Vec<ClickAnnotation>> {
        proptest::collection::vec((0usize..16, 0usize..16, 0usize..3), 0..6)
            .prop_map(|v| v.into_iter().map(|(r, c, k)| click(r, c, k)).collect())
    }

    proptest! {
        #[test]
        fn superposition_is_pointwise_max(a in arb_clicks(), b in arb_clicks(), binary in any::<bool>()) {
            let kind = if binary { EncodingKind::BinaryDisk } else { EncodingKind::DistanceTransform };
            let cfg = EncodingConfig::new(kind);
            let ea = encode(&a, &cfg, (16, 16), 3, EncodingContext::None).unwrap();
            let eb = encode(&b, &cfg, (16, 16), 3, EncodingContext::None).unwrap();
            let all: Vec<_> = a.iter().chain(&b).cloned().collect();
            let mut merged = ea.clone();
            merged.merge_max(&eb);
            prop_assert_eq!(encode(&all, &cfg, (16, 16), 3, EncodingContext::None).unwrap(), merged);
        }

        #[test]
        fn channel_purity_and_monotone_footprint(clicks in arb_clicks()) {
            let cfg = EncodingConfig::distance_transform();
            let t = encode(&clicks, &cfg, (16, 16), 3, EncodingContext::None).unwrap();
            for k in 0..3 {
                let own: Vec<_> = clicks.iter().filter(|c| c.class_id == k).collect();
                for ((y, x), &v) in t.channels().index_axis(Axis(0), k).indexed_iter() {
                    if own.is_empty() {
                        prop_assert_eq!(v, 0.0);
                        continue;
                    }
                    let d = own.iter()
                        .map(|c| ((c.row as f64 - y as f64).powi(2) + (c.col as f64 - x as f64).powi(2)).sqrt())
                        .fold(f64::INFINITY, f64::min);
                    let expected = (1.0 - d / 10.0).max(0.0) as f32;
                    prop_assert!((v - expected).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn connected_groundtruth_matches_flood_fill(bits in proptest::collection::vec(0u8..2, 100), r in 0usize..10, c in 0usize..10) {
            let labels = LabelMask::new(Array2::from_shape_fn((10, 10), |(y, x)| bits[y * 10 + x]), 2).unwrap();
            let class = labels.get(r, c).unwrap();
            let cfg = EncodingConfig::new(EncodingKind::ConnectedGroundtruth);
            let t = encode(&[click(r, c, class)], &cfg, (10, 10), 2, EncodingContext::Labels(&labels)).unwrap();
            let mask = labels.labels().mapv(|v| v as usize == class);
            let comp = component_containing(&mask, (r, c));
            let plane = t.channels().index_axis(Axis(0), class).mapv(|v| v == 1.0);
            prop_assert_eq!(plane, comp);
        }
    }
}
