//! Simulated annotator that places clicks from the ground truth.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::UncertaintyMap;
use crate::annotation::{ClickAnnotation, Origin};
use crate::error::{Error, Result};
use crate::prediction::PredictionMap;
use crate::raster::LabelMask;
use crate::spatial::{connected_components, pole_of_inaccessibility};
use crate::tiling::Window;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentStrategy {
    /// Interior point of the largest error component.
    MaxErrorCenter,
    /// Uniform over misclassified pixels.
    RandomInError,
    /// Uniform over misclassified pixels in the top uncertainty set.
    UncertaintyInError,
    /// Uniform over the top uncertainty set, errors or not.
    UncertaintyOnly,
    /// Uniform over all labelled pixels.
    Random,
}

impl AgentStrategy {
    pub const ALL: [AgentStrategy; 5] = [
        Self::MaxErrorCenter,
        Self::RandomInError,
        Self::UncertaintyInError,
        Self::UncertaintyOnly,
        Self::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::MaxErrorCenter => "max_error_center",
            Self::RandomInError => "random_in_error",
            Self::UncertaintyInError => "uncertainty_in_error",
            Self::UncertaintyOnly => "uncertainty_only",
            Self::Random => "random",
        }
    }

    pub fn needs_uncertainty(self) -> bool {
        matches!(self, Self::UncertaintyInError | Self::UncertaintyOnly)
    }
}

impl std::str::FromStr for AgentStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown agent strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub strategy: AgentStrategy,
    /// Uncertainty quantile above which pixels count as highly uncertain.
    pub quantile: f64,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            strategy: AgentStrategy::MaxErrorCenter,
            quantile: 0.9,
            seed: 0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return Err(Error::Config(format!("quantile {} outside (0, 1)", self.quantile)));
        }
        Ok(())
    }
}

/// A connected region of misclassified pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorComponent {
    pub pixels: Vec<(usize, usize)>,
    /// Pixel farthest from the component's boundary.
    pub interior: (usize, usize),
}

impl ErrorComponent {
    pub fn size(&self) -> usize {
        self.pixels.len()
    }
}

fn check_shapes(prediction: &PredictionMap, labels: &LabelMask) -> Result<()> {
    labels.check_shape(prediction.height(), prediction.width())
}

/// Misclassified labelled pixels.
pub fn error_mask(prediction: &PredictionMap, labels: &LabelMask) -> Result<Array2<bool>> {
    check_shapes(prediction, labels)?;
    let argmax = prediction.argmax();
    Ok(Array2::from_shape_fn(argmax.dim(), |(y, x)| {
        labels.get(y, x).is_some_and(|t| t != argmax[[y, x]] as usize)
    }))
}

fn components_of(mask: &Array2<bool>) -> Vec<ErrorComponent> {
    let (_, comps) = connected_components(mask);
    let mut out: Vec<ErrorComponent> = comps
        .into_iter()
        .map(|c| {
            let (y0, x0) = c.pixels.iter().fold((usize::MAX, usize::MAX), |(a, b), &(y, x)| (a.min(y), b.min(x)));
            let (y1, x1) = c.pixels.iter().fold((0, 0), |(a, b), &(y, x)| (a.max(y), b.max(x)));
            let mut local = Array2::from_elem((y1 - y0 + 1, x1 - x0 + 1), false);
            for &(y, x) in &c.pixels {
                local[[y - y0, x - x0]] = true;
            }
            let (py, px) = pole_of_inaccessibility(&local).expect("component is non-empty");
            ErrorComponent {
                pixels: c.pixels,
                interior: (py + y0, px + x0),
            }
        })
        .collect();
    // Stable: equal sizes keep row-major order of their first pixel.
    out.sort_by(|a, b| b.size().cmp(&a.size()));
    out
}

/// 8-connected error components, largest first.
pub fn error_components(prediction: &PredictionMap, labels: &LabelMask) -> Result<Vec<ErrorComponent>> {
    Ok(components_of(&error_mask(prediction, labels)?))
}

/// Result of asking the agent for a click.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ClickOutcome {
    Click {
        click: ClickAnnotation,
        /// Size of the set the click was drawn from.
        candidates: usize,
        /// Error component containing the click, when it is on an error.
        component_size: Option<usize>,
    },
    NoClick {
        reason: String,
    },
}

impl ClickOutcome {
    pub fn click(&self) -> Option<ClickAnnotation> {
        match self {
            Self::Click { click, .. } => Some(*click),
            Self::NoClick { .. } => None,
        }
    }
}

/// Pixels of `region` whose score reaches the `quantile` of the scores in
/// the region.
fn top_uncertain(uncertainty: &UncertaintyMap, region: &Window, quantile: f64) -> Array2<bool> {
    let (h, w) = uncertainty.scores.dim();
    let mut values: Vec<f64> = region
        .rows()
        .flat_map(|y| region.cols().map(move |x| (y, x)))
        .map(|p| uncertainty.scores[p])
        .collect();
    values.sort_by(f64::total_cmp);
    let idx = ((quantile * values.len() as f64).floor() as usize).min(values.len() - 1);
    let threshold = values[idx];
    Array2::from_shape_fn((h, w), |(y, x)| region.contains(y, x) && uncertainty.scores[[y, x]] >= threshold)
}

/// Places one click inside `region` (the whole image when `None`).
pub fn sample_click(
    region: Option<Window>,
    prediction: &PredictionMap,
    labels: &LabelMask,
    uncertainty: Option<&UncertaintyMap>,
    config: &AgentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ClickOutcome> {
    config.validate()?;
    check_shapes(prediction, labels)?;
    let (h, w) = (labels.height(), labels.width());
    let region = region.unwrap_or(Window::new(0, 0, h, w));
    if region.row + region.height > h || region.col + region.width > w || region.area() == 0 {
        return Err(Error::InvalidArgument(format!("region {region:?} outside the {h}x{w} image")));
    }
    let uncertainty = if config.strategy.needs_uncertainty() {
        let u = uncertainty.ok_or_else(|| {
            Error::InvalidArgument(format!("agent strategy {} needs an uncertainty map", config.strategy.name()))
        })?;
        if u.scores.dim() != (h, w) {
            return Err(Error::Shape("uncertainty map does not match the labels".into()));
        }
        Some(u)
    } else {
        None
    };
    let mut errors = error_mask(prediction, labels)?;
    errors.indexed_iter_mut().for_each(|((y, x), e)| *e &= region.contains(y, x));
    let components = components_of(&errors);
    let component_of = |p: (usize, usize)| components.iter().find(|c| c.pixels.binary_search(&p).is_ok()).map(ErrorComponent::size);

    let candidates: Vec<(usize, usize)> = match config.strategy {
        AgentStrategy::MaxErrorCenter => {
            let Some(largest) = components.first() else {
                return Ok(no_click("no misclassified pixels in the region"));
            };
            let (row, col) = largest.interior;
            let class_id = labels.get(row, col).expect("error pixels are labelled");
            return Ok(ClickOutcome::Click {
                click: ClickAnnotation::new(row, col, class_id, Origin::Simulated),
                candidates: largest.size(),
                component_size: Some(largest.size()),
            });
        }
        AgentStrategy::RandomInError => errors.indexed_iter().filter(|(_, &e)| e).map(|(p, _)| p).collect(),
        AgentStrategy::UncertaintyInError => {
            let top = top_uncertain(uncertainty.expect("checked above"), &region, config.quantile);
            errors.indexed_iter().filter(|&(p, &e)| e && top[p]).map(|(p, _)| p).collect()
        }
        AgentStrategy::UncertaintyOnly => {
            let top = top_uncertain(uncertainty.expect("checked above"), &region, config.quantile);
            top.indexed_iter()
                .filter(|&((y, x), &t)| t && labels.get(y, x).is_some())
                .map(|(p, _)| p)
                .collect()
        }
        AgentStrategy::Random => region
            .rows()
            .flat_map(|y| region.cols().map(move |x| (y, x)))
            .filter(|&(y, x)| labels.get(y, x).is_some())
            .collect(),
    };
    if candidates.is_empty() {
        return Ok(no_click("candidate set is empty"));
    }
    let (row, col) = candidates[rng.gen_range(0..candidates.len())];
    let class_id = labels.get(row, col).expect("candidates are labelled");
    Ok(ClickOutcome::Click {
        click: ClickAnnotation::new(row, col, class_id, Origin::Simulated),
        candidates: candidates.len(),
        component_size: component_of((row, col)),
    })
}

fn no_click(reason: &str) -> ClickOutcome {
    ClickOutcome::NoClick { reason: reason.into() }
}
