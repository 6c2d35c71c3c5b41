//! Segmentation quality measures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prediction::PredictionMap;
use crate::raster::LabelMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouScore {
    pub mean: f64,
    /// `None` for classes absent from both prediction and labels.
    pub per_class: Vec<Option<f64>>,
}

fn check(prediction: &PredictionMap, labels: &LabelMask) -> Result<()> {
    if (prediction.height(), prediction.width()) != (labels.height(), labels.width()) {
        return Err(Error::Shape(format!(
            "prediction is {}x{}, labels are {}x{}",
            prediction.height(),
            prediction.width(),
            labels.height(),
            labels.width()
        )));
    }
    if prediction.class_count() != labels.class_count() {
        return Err(Error::Shape(format!(
            "prediction has {} classes, labels {}",
            prediction.class_count(),
            labels.class_count()
        )));
    }
    Ok(())
}

/// Intersection over union of the argmax against the labels, ignoring
/// unlabelled pixels. Classes absent from both are left out of the mean.
pub fn iou(prediction: &PredictionMap, labels: &LabelMask) -> Result<IouScore> {
    check(prediction, labels)?;
    let n = labels.class_count();
    let mut inter = vec![0usize; n];
    let mut union = vec![0usize; n];
    let argmax = prediction.argmax();
    for ((y, x), &p) in argmax.indexed_iter() {
        let Some(t) = labels.get(y, x) else { continue };
        let p = p as usize;
        if p == t {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[t] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..n)
        .map(|k| (union[k] > 0).then(|| inter[k] as f64 / union[k] as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        1.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(IouScore { mean, per_class })
}

/// Number of labelled pixels whose argmax differs from the label.
pub fn misclassification_count(prediction: &PredictionMap, labels: &LabelMask) -> Result<usize> {
    check(prediction, labels)?;
    Ok(prediction
        .argmax()
        .indexed_iter()
        .filter(|&((y, x), &p)| labels.get(y, x).is_some_and(|t| t != p as usize))
        .count())
}

/// Fraction of labelled pixels classified correctly.
pub fn pixel_accuracy(prediction: &PredictionMap, labels: &LabelMask) -> Result<f64> {
    let wrong = misclassification_count(prediction, labels)?;
    let valid = labels.labels().iter().filter(|&&v| (v as usize) < labels.class_count()).count();
    Ok(if valid == 0 { 1.0 } else { 1.0 - wrong as f64 / valid as f64 })
}
