//! Interactive retraining on sparse click targets.
//!
//! The loss is the cross-entropy on clicked pixels plus `lambda` times the
//! mean absolute difference between the current and the initial prediction.
//! Refinement runs a fixed number of plain SGD steps on that loss, randomly
//! hiding the annotation channels from the network.

use std::time::Instant;

use ndarray::{Array3, ArrayView3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{encode, AnnotationTensor, ClickAnnotation, EncodingConfig, EncodingContext, EncodingKind};
use crate::error::{Error, Result};
use crate::model::{DropoutMode, SegmentationModel};
use crate::nn::{sgd_step, softmax_backward};
use crate::prediction::PredictionMap;
use crate::raster::{LabelMask, RasterImage};

/// Floor applied to probabilities inside the log.
pub const LOG_CLAMP: f64 = 1e-7;

/// Per-pixel one-hot targets for clicked pixels, `-1` everywhere else.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTarget {
    values: Array3<i8>,
}

impl SparseTarget {
    pub fn values(&self) -> ArrayView3<'_, i8> {
        self.values.view()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    /// Class of an annotated pixel.
    pub fn annotated(&self, row: usize, col: usize) -> Option<usize> {
        (0..self.values.dim().0).find(|&k| self.values[[k, row, col]] == 1)
    }

    pub fn annotated_count(&self) -> usize {
        let (_, h, w) = self.values.dim();
        (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .filter(|&(y, x)| self.values[[0, y, x]] != -1)
            .count()
    }
}

/// Builds the sparse target. A later click on the same pixel overwrites an
/// earlier one.
pub fn build_sparse_target(clicks: &[ClickAnnotation], shape: (usize, usize), classes: usize) -> Result<SparseTarget> {
    let (h, w) = shape;
    let mut values = Array3::from_elem((classes, h, w), -1i8);
    for click in clicks {
        click.check(h, w, classes)?;
        for k in 0..classes {
            values[[k, click.row, click.col]] = i8::from(k == click.class_id);
        }
    }
    Ok(SparseTarget { values })
}

/// Value and gradient of the interactive loss.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub loss: f64,
    pub cross_entropy: f64,
    pub l1: f64,
    /// Gradient with respect to the prediction probabilities.
    pub grad: Array3<f64>,
}

/// `mean_annotated(-ln f_c) + lambda * mean_all |f - p0|`, with the
/// cross-entropy term 0 when nothing is annotated.
pub fn interactive_loss(
    prediction: ArrayView3<'_, f64>,
    target: &SparseTarget,
    p0: ArrayView3<'_, f64>,
    lambda: f64,
) -> Result<LossValue> {
    let dims = prediction.dim();
    if p0.dim() != dims || target.dims() != dims {
        return Err(Error::Shape(format!(
            "prediction {:?}, initial prediction {:?} and target {:?} disagree",
            dims,
            p0.dim(),
            target.dims()
        )));
    }
    let (n, h, w) = dims;
    let mut grad = Array3::<f64>::zeros(dims);
    let annotated = target.annotated_count();
    let mut ce = 0.0;
    if annotated > 0 {
        let scale = 1.0 / annotated as f64;
        for y in 0..h {
            for x in 0..w {
                if let Some(c) = target.annotated(y, x) {
                    let p = prediction[[c, y, x]];
                    ce -= p.max(LOG_CLAMP).ln();
                    if p > LOG_CLAMP {
                        grad[[c, y, x]] -= scale / p;
                    }
                }
            }
        }
        ce *= scale;
    }
    let entries = (n * h * w) as f64;
    let mut l1 = 0.0;
    if lambda != 0.0 {
        for ((idx, &f), &q) in prediction.indexed_iter().zip(p0.iter()) {
            let d = f - q;
            l1 += d.abs();
            if d != 0.0 {
                grad[idx] += lambda * d.signum() / entries;
            }
        }
    } else {
        l1 = prediction.iter().zip(p0.iter()).map(|(f, q)| (f - q).abs()).sum();
    }
    l1 /= entries;
    Ok(LossValue {
        loss: ce + lambda * l1,
        cross_entropy: ce,
        l1,
        grad,
    })
}

/// Channel softmax in double precision.
pub fn softmax_f64(logits: ArrayView3<'_, f64>) -> Array3<f64> {
    let (n, h, w) = logits.dim();
    let mut out = Array3::zeros((n, h, w));
    for y in 0..h {
        for x in 0..w {
            let m = (0..n).map(|k| logits[[k, y, x]]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..n).map(|k| (logits[[k, y, x]] - m).exp()).sum();
            for k in 0..n {
                out[[k, y, x]] = (logits[[k, y, x]] - m).exp() / sum;
            }
        }
    }
    out
}

/// Chains a probability gradient through the softmax, in double precision.
pub fn softmax_backward_f64(probs: ArrayView3<'_, f64>, dprobs: ArrayView3<'_, f64>) -> Array3<f64> {
    let (n, h, w) = probs.dim();
    let mut out = Array3::zeros((n, h, w));
    for y in 0..h {
        for x in 0..w {
            let dot: f64 = (0..n).map(|k| probs[[k, y, x]] * dprobs[[k, y, x]]).sum();
            for k in 0..n {
                out[[k, y, x]] = probs[[k, y, x]] * (dprobs[[k, y, x]] - dot);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscaConfig {
    pub lambda: f64,
    pub steps: usize,
    pub learning_rate: f32,
    /// Chance per step that the annotation channels are zeroed.
    pub ac_dropout_probability: f64,
    pub regularization_enabled: bool,
    pub ac_enabled: bool,
}

impl Default for DiscaConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            steps: 10,
            learning_rate: 2e-6,
            ac_dropout_probability: 0.5,
            regularization_enabled: true,
            ac_enabled: true,
        }
    }
}

impl DiscaConfig {
    /// Learning rate calibrated for the small reference network on toy
    /// tiles; the other values keep their defaults.
    pub fn toy() -> Self {
        Self {
            learning_rate: TOY_LEARNING_RATE,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("refinement needs at least one step".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.ac_dropout_probability) {
            return Err(Error::Config(format!(
                "ac_dropout_probability {} outside [0, 1]",
                self.ac_dropout_probability
            )));
        }
        Ok(())
    }

    pub fn effective_lambda(&self) -> f64 {
        if self.regularization_enabled {
            self.lambda
        } else {
            0.0
        }
    }
}

/// See [`DiscaConfig::toy`].
pub const TOY_LEARNING_RATE: f32 = 1e-5;

/// Inputs of one refinement call.
pub struct RefineRequest<'a> {
    pub image: &'a RasterImage,
    pub clicks: &'a [ClickAnnotation],
    /// Frozen initial prediction of this image.
    pub p0: &'a PredictionMap,
    /// Only needed by the ground-truth connected encoding.
    pub labels: Option<&'a LabelMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub losses: Vec<f64>,
    pub ac_hidden_steps: usize,
    pub wall_time: f64,
}

/// Encodes clicks with whatever context the encoding needs, taking the
/// initial prediction as the prediction context.
pub fn encode_for_refinement(
    clicks: &[ClickAnnotation],
    encoding: &EncodingConfig,
    image: &RasterImage,
    classes: usize,
    p0: &PredictionMap,
    labels: Option<&LabelMask>,
) -> Result<AnnotationTensor> {
    let ctx = match encoding.kind {
        EncodingKind::BinaryDisk | EncodingKind::DistanceTransform => EncodingContext::None,
        EncodingKind::GuidedFilter => EncodingContext::Image(image),
        EncodingKind::ConnectedPrediction => EncodingContext::Prediction(p0),
        EncodingKind::ConnectedGroundtruth => {
            EncodingContext::Labels(labels.ok_or(Error::MissingContext("connected_groundtruth"))?)
        }
    };
    encode(clicks, encoding, (image.height(), image.width()), classes, ctx)
}

/// Runs `steps` SGD updates of the interactive loss and returns the fresh
/// prediction. On a non-finite loss the parameters are restored and the
/// error is returned.
pub fn refine(
    model: &mut SegmentationModel,
    request: &RefineRequest<'_>,
    config: &DiscaConfig,
    encoding: &EncodingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(PredictionMap, RefineReport)> {
    config.validate()?;
    let start = Instant::now();
    let image = request.image;
    let classes = model.classes();
    let (h, w) = (image.height(), image.width());
    let p0 = request.p0;
    if (p0.class_count(), p0.height(), p0.width()) != (classes, h, w) {
        return Err(Error::Shape(format!(
            "initial prediction {}x{}x{} does not match image {h}x{w} with {classes} classes",
            p0.class_count(),
            p0.height(),
            p0.width()
        )));
    }
    let target = build_sparse_target(request.clicks, (h, w), classes)?;
    let annotations = encode_for_refinement(request.clicks, encoding, image, classes, p0, request.labels)?;
    let with_clicks = model.input_tensor(image, &annotations)?;
    let without_clicks = model.input_tensor(image, &AnnotationTensor::zeros(classes, h, w))?;
    let p0_64 = p0.probabilities().mapv(f64::from);
    let lambda = config.effective_lambda();

    let snapshot = model.params().to_vec();
    let mut grads = vec![0.0f32; model.param_count()];
    let mut report = RefineReport {
        losses: Vec::with_capacity(config.steps),
        ac_hidden_steps: 0,
        wall_time: 0.0,
    };
    for step in 0..config.steps {
        let hide = !config.ac_enabled || rng.gen_bool(config.ac_dropout_probability);
        report.ac_hidden_steps += usize::from(hide);
        let input = if hide { &without_clicks } else { &with_clicks };
        let trace = model.run(input, DropoutMode::Off);
        let probs = trace.probabilities();
        let value = interactive_loss(probs.mapv(f64::from).view(), &target, p0_64.view(), lambda)?;
        if !value.loss.is_finite() || model.params().iter().any(|p| !p.is_finite()) {
            model.set_params(&snapshot)?;
            return Err(Error::NonFiniteLoss { step });
        }
        report.losses.push(value.loss);
        let dprobs = value.grad.mapv(|g| g as f32);
        let dlogits = softmax_backward(&probs, &dprobs);
        grads.fill(0.0);
        model.backward(&trace, &dlogits, Some(&mut grads), false);
        sgd_step(model.params_mut(), &grads, config.learning_rate);
    }
    if model.params().iter().any(|p| !p.is_finite()) {
        model.set_params(&snapshot)?;
        return Err(Error::NonFiniteLoss { step: config.steps });
    }
    let final_input = if config.ac_enabled { &with_clicks } else { &without_clicks };
    let prediction = PredictionMap::new(model.run(final_input, DropoutMode::Off).probabilities())?;
    report.wall_time = start.elapsed().as_secs_f64();
    Ok((prediction, report))
}

/// How parameters carry over between images of a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightPolicy {
    #[default]
    ResetPerImage,
    Sequential,
}

/// Keeps the registered checkpoint and the working copy refined on images.
#[derive(Debug, Clone)]
pub struct SessionWeights {
    checkpoint: SegmentationModel,
    current: SegmentationModel,
    policy: WeightPolicy,
}

impl SessionWeights {
    pub fn new(checkpoint: SegmentationModel, policy: WeightPolicy) -> Self {
        Self {
            current: checkpoint.clone(),
            checkpoint,
            policy,
        }
    }

    pub fn policy(&self) -> WeightPolicy {
        self.policy
    }

    /// Model to use for the next image: the checkpoint again under
    /// `ResetPerImage`, the carried-over parameters under `Sequential`.
    pub fn begin_image(&mut self) -> &mut SegmentationModel {
        if self.policy == WeightPolicy::ResetPerImage {
            self.current = self.checkpoint.clone();
        }
        &mut self.current
    }

    pub fn current(&self) -> &SegmentationModel {
        &self.current
    }

    pub fn current_mut(&mut self) -> &mut SegmentationModel {
        &mut self.current
    }

    pub fn checkpoint(&self) -> &SegmentationModel {
        &self.checkpoint
    }
}
